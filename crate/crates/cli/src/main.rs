use clap::Parser;
use msbif_cli::Cli;

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // --help and --version are not errors
            std::process::exit(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match msbif_cli::run(cli) {
        Ok(out) => print!("{out}"),
        Err(e) => {
            eprint!("{e}");
            if !e.to_string().ends_with('\n') {
                eprintln!();
            }
            std::process::exit(e.exit_code());
        }
    }
}
