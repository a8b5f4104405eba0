//! SDE models `dX = F(X) dt + G(X) dW` and the built-in example registry.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::linalg::DenseMatrix;

/// Anything that can be stepped by the Euler–Maruyama integrator.
pub trait Sde: Sync {
    fn dim(&self) -> usize;
    fn noise_dim(&self) -> usize;
    fn drift(&self, x: &[f64], out: &mut [f64]);
    /// Writes the `d x m` diffusion matrix into `out`.
    fn diffusion(&self, x: &[f64], out: &mut DenseMatrix);
    /// Affine systems are integrated without drift taming.
    fn is_affine(&self) -> bool {
        false
    }
}

pub const MODEL_NAMES: [&str; 7] = [
    "pitchfork",
    "fold",
    "transcritical",
    "cir",
    "bistable2d",
    "lorenz",
    "allen_cahn",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PitchforkNoise {
    Additive,
    Linear,
    Quadratic,
}

#[derive(Debug, Clone, PartialEq)]
enum ModelKind {
    Pitchfork { gamma: f64, sigma: f64, noise: PitchforkNoise },
    Fold { gamma: f64, sigma11: f64, sigma12: f64 },
    Transcritical { gamma: f64, sigma11: f64, sigma12: f64 },
    Cir { kappa: f64, theta: f64, sigma: f64 },
    Bistable2d { gamma: f64, sigma11: f64, sigma13: f64, sigma22: f64, sigma23: f64 },
    Lorenz {
        rho: f64,
        b: f64,
        s: f64,
        sigma11: f64,
        sigma22: f64,
        sigma33: f64,
        sigma23: f64,
        sigma32: f64,
    },
    AllenCahn { gamma: f64, sigma_bar: f64, d: usize },
}

/// Region of state space the dynamics are known to preserve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvariantDomain {
    /// Every coordinate nonnegative.
    PositiveCone,
    /// `|x_1|^2 <= bound`; used for the Lorenz system with nonlinear noise.
    BoundedFirstCoordinate,
}

/// Dissipativity constants: `<x,F> + (p-1)/2 |G|_F^2 <= -alpha2 |x|^2 + alpha3`,
/// and optionally the monotone bound `<= alpha1 (1 + |x|^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DissipativityMeta {
    pub p: f64,
    pub alpha1: Option<f64>,
    pub alpha2: f64,
    pub alpha3: f64,
}

/// Growth bounds `|D²F| <= c1 (1 + |x|^q1)` and `|D²G_i| <= c2 (1 + |x|^q2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RemainderMeta {
    pub c1: f64,
    pub q1: f64,
    pub c2: f64,
    pub q2: f64,
}

/// Quadratic Lyapunov function `V(x) = sum_i w_i (x_i - c_i)^2` used in place of
/// `|x|^2` for dissipativity checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovWeights {
    pub weights: Vec<f64>,
    pub shift: Vec<f64>,
}

impl LyapunovWeights {
    pub fn value(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.weights)
            .zip(&self.shift)
            .map(|((xi, w), c)| w * (xi - c) * (xi - c))
            .sum()
    }
}

/// JSON model configuration. Unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
}

impl ModelConfig {
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        serde_json::from_str(text).map_err(|e| ModelError::InvalidConfig(e.to_string()))
    }

    pub fn build(&self) -> Result<ModelSpec, ModelError> {
        let mut model = builtin(&self.model, self.variant.as_deref(), self.d)?;
        for (k, v) in &self.params {
            model = model.with_param(k, *v)?;
        }
        Ok(model)
    }
}

/// Which diffusion derivative to take.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JacobianTarget {
    Drift,
    /// Column `i` of `G`, zero based.
    DiffusionColumn(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JacobianMode {
    Analytic,
    FiniteDifference,
}

/// An SDE from the registry together with its current parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    name: String,
    variant: String,
    kind: ModelKind,
}

/// Looks up a registry model. `variant = None` picks the model's default.
pub fn builtin(name: &str, variant: Option<&str>, dim: Option<usize>) -> Result<ModelSpec, ModelError> {
    let unknown_variant = |v: &str| ModelError::UnknownVariant {
        model: name.to_string(),
        variant: v.to_string(),
    };
    let (variant, kind) = match name {
        "pitchfork" => {
            let v = variant.unwrap_or("additive");
            let noise = match v {
                "additive" => PitchforkNoise::Additive,
                "linear" => PitchforkNoise::Linear,
                "quadratic" => PitchforkNoise::Quadratic,
                _ => return Err(unknown_variant(v)),
            };
            (v, ModelKind::Pitchfork { gamma: 0.25, sigma: 0.1, noise })
        }
        "fold" | "transcritical" => {
            let v = variant.unwrap_or("multiplicative");
            let (sigma11, sigma12) = match v {
                "multiplicative" => (0.1, 0.0),
                "additive" => (0.0, 0.1),
                _ => return Err(unknown_variant(v)),
            };
            let kind = if name == "fold" {
                ModelKind::Fold { gamma: 0.25, sigma11, sigma12 }
            } else {
                ModelKind::Transcritical { gamma: 0.25, sigma11, sigma12 }
            };
            (v, kind)
        }
        "cir" => {
            let v = variant.unwrap_or("default");
            if v != "default" {
                return Err(unknown_variant(v));
            }
            (v, ModelKind::Cir { kappa: 2.0, theta: 0.02, sigma: 0.2 })
        }
        "bistable2d" => {
            let v = variant.unwrap_or("multiplicative");
            if v != "multiplicative" {
                return Err(unknown_variant(v));
            }
            (
                v,
                ModelKind::Bistable2d {
                    gamma: 0.0,
                    sigma11: 0.25,
                    sigma13: 0.01,
                    sigma22: 0.1,
                    sigma23: 0.01,
                },
            )
        }
        "lorenz" => {
            let v = variant.unwrap_or("diagonal");
            let off = match v {
                "diagonal" => 0.0,
                "nonlinear" => 0.01,
                _ => return Err(unknown_variant(v)),
            };
            (
                v,
                ModelKind::Lorenz {
                    rho: 10.0,
                    b: 8.0 / 3.0,
                    s: 10.0,
                    sigma11: 0.01,
                    sigma22: 0.01,
                    sigma33: 0.01,
                    sigma23: off,
                    sigma32: off,
                },
            )
        }
        "allen_cahn" => {
            let v = variant.unwrap_or("default");
            if v != "default" {
                return Err(unknown_variant(v));
            }
            let d = dim.unwrap_or(50);
            if d < 3 {
                return Err(ModelError::InvalidConfig(format!("allen_cahn needs d >= 3, got {d}")));
            }
            (v, ModelKind::AllenCahn { gamma: 0.5, sigma_bar: 0.1, d })
        }
        other => return Err(ModelError::UnknownModel(other.to_string())),
    };
    let model = ModelSpec {
        name: name.to_string(),
        variant: variant.to_string(),
        kind,
    };
    if let Some(d) = dim {
        if d != model.dim() {
            return Err(ModelError::InvalidConfig(format!(
                "model `{name}` has fixed dimension {}, got d = {d}",
                model.dim()
            )));
        }
    }
    Ok(model)
}

impl ModelSpec {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn variant(&self) -> &str {
        &self.variant
    }

    /// Parameter values in a fixed order.
    pub fn params(&self) -> Vec<(&'static str, f64)> {
        match &self.kind {
            ModelKind::Pitchfork { gamma, sigma, .. } => vec![("gamma", *gamma), ("sigma", *sigma)],
            ModelKind::Fold { gamma, sigma11, sigma12 } | ModelKind::Transcritical { gamma, sigma11, sigma12 } => {
                vec![("gamma", *gamma), ("sigma11", *sigma11), ("sigma12", *sigma12)]
            }
            ModelKind::Cir { kappa, theta, sigma } => vec![("kappa", *kappa), ("theta", *theta), ("sigma", *sigma)],
            ModelKind::Bistable2d { gamma, sigma11, sigma13, sigma22, sigma23 } => vec![
                ("gamma", *gamma),
                ("sigma11", *sigma11),
                ("sigma13", *sigma13),
                ("sigma22", *sigma22),
                ("sigma23", *sigma23),
            ],
            ModelKind::Lorenz { rho, b, s, sigma11, sigma22, sigma33, sigma23, sigma32 } => vec![
                ("rho", *rho),
                ("b", *b),
                ("s", *s),
                ("sigma11", *sigma11),
                ("sigma22", *sigma22),
                ("sigma33", *sigma33),
                ("sigma23", *sigma23),
                ("sigma32", *sigma32),
            ],
            ModelKind::AllenCahn { gamma, sigma_bar, .. } => vec![("gamma", *gamma), ("sigma_bar", *sigma_bar)],
        }
    }

    pub fn param(&self, name: &str) -> Option<f64> {
        self.params().into_iter().find(|(k, _)| *k == name).map(|(_, v)| v)
    }

    pub fn with_param(&self, name: &str, value: f64) -> Result<Self, ModelError> {
        if !value.is_finite() {
            return Err(ModelError::InvalidConfig(format!("parameter {name} must be finite")));
        }
        let mut out = self.clone();
        let slot: Option<&mut f64> = match &mut out.kind {
            ModelKind::Pitchfork { gamma, sigma, .. } => match name {
                "gamma" => Some(gamma),
                "sigma" => Some(sigma),
                _ => None,
            },
            ModelKind::Fold { gamma, sigma11, sigma12 } | ModelKind::Transcritical { gamma, sigma11, sigma12 } => {
                match name {
                    "gamma" => Some(gamma),
                    "sigma11" => Some(sigma11),
                    "sigma12" => Some(sigma12),
                    _ => None,
                }
            }
            ModelKind::Cir { kappa, theta, sigma } => match name {
                "kappa" => Some(kappa),
                "theta" => Some(theta),
                "sigma" => Some(sigma),
                _ => None,
            },
            ModelKind::Bistable2d { gamma, sigma11, sigma13, sigma22, sigma23 } => match name {
                "gamma" => Some(gamma),
                "sigma11" => Some(sigma11),
                "sigma13" => Some(sigma13),
                "sigma22" => Some(sigma22),
                "sigma23" => Some(sigma23),
                _ => None,
            },
            ModelKind::Lorenz { rho, b, s, sigma11, sigma22, sigma33, sigma23, sigma32 } => match name {
                "rho" => Some(rho),
                "b" => Some(b),
                "s" => Some(s),
                "sigma11" => Some(sigma11),
                "sigma22" => Some(sigma22),
                "sigma33" => Some(sigma33),
                "sigma23" => Some(sigma23),
                "sigma32" => Some(sigma32),
                _ => None,
            },
            ModelKind::AllenCahn { gamma, sigma_bar, .. } => match name {
                "gamma" => Some(gamma),
                "sigma_bar" => Some(sigma_bar),
                _ => None,
            },
        };
        match slot {
            Some(p) => *p = value,
            None => {
                return Err(ModelError::UnknownParameter {
                    model: self.name.clone(),
                    param: name.to_string(),
                })
            }
        }
        if let ModelKind::Cir { kappa, theta, .. } = out.kind {
            if kappa <= 0.0 || theta <= 0.0 {
                return Err(ModelError::InvalidConfig("cir needs kappa, theta > 0".into()));
            }
        }
        Ok(out)
    }

    /// Grid spacing and noise intensity `sigma_bar / sqrt(dx)` of the Allen–Cahn system.
    pub fn allen_cahn_scales(&self) -> Option<(f64, f64)> {
        match self.kind {
            ModelKind::AllenCahn { sigma_bar, d, .. } => {
                let dx = 2.0 * PI / (d as f64 - 1.0);
                Some((dx, sigma_bar / dx.sqrt()))
            }
            _ => None,
        }
    }

    /// Periodic second-difference matrix of the Allen–Cahn system.
    pub fn allen_cahn_laplacian(&self) -> Option<DenseMatrix> {
        let ModelKind::AllenCahn { d, .. } = self.kind else {
            return None;
        };
        let (dx, _) = self.allen_cahn_scales()?;
        let c = 1.0 / (dx * dx);
        let mut a = DenseMatrix::zeros(d, d);
        for i in 0..d {
            a[(i, i)] = -2.0 * c;
            a[(i, (i + 1) % d)] += c;
            a[(i, (i + d - 1) % d)] += c;
        }
        Some(a)
    }

    pub fn has_analytic_jacobian(&self) -> bool {
        true
    }

    pub fn invariant_domain(&self) -> Option<InvariantDomain> {
        match &self.kind {
            ModelKind::Pitchfork { noise: PitchforkNoise::Linear, .. } => Some(InvariantDomain::PositiveCone),
            ModelKind::Fold { sigma12, .. } | ModelKind::Transcritical { sigma12, .. } if *sigma12 == 0.0 => {
                Some(InvariantDomain::PositiveCone)
            }
            ModelKind::Cir { .. } => Some(InvariantDomain::PositiveCone),
            ModelKind::Lorenz { sigma23, sigma32, .. } if *sigma23 != 0.0 || *sigma32 != 0.0 => {
                Some(InvariantDomain::BoundedFirstCoordinate)
            }
            _ => None,
        }
    }

    /// `kappa = min{(1 - s22²)/s32², (b - s33²)/s23²}`: bound on `|x|²` under which the
    /// Lorenz system with nonlinear noise is dissipative. `None` for other models.
    pub fn lorenz_dissipativity_bound(&self) -> Option<f64> {
        match self.kind {
            ModelKind::Lorenz { b, sigma22, sigma33, sigma23, sigma32, .. } => {
                let a = if sigma32 != 0.0 {
                    (1.0 - sigma22 * sigma22) / (sigma32 * sigma32)
                } else {
                    f64::INFINITY
                };
                let c = if sigma23 != 0.0 {
                    (b - sigma33 * sigma33) / (sigma23 * sigma23)
                } else {
                    f64::INFINITY
                };
                Some(a.min(c))
            }
            _ => None,
        }
    }

    /// Weighted Lyapunov function replacing `|x|²` in the dissipativity check.
    pub fn lyapunov(&self) -> Option<LyapunovWeights> {
        match self.kind {
            ModelKind::Lorenz { rho, s, .. } => Some(LyapunovWeights {
                weights: vec![rho, s, s],
                shift: vec![0.0, 0.0, 2.0 * rho],
            }),
            _ => None,
        }
    }

    /// Closed-form dissipativity constants for moment order `p`, where known.
    pub fn dissipativity_meta(&self, p: f64) -> Option<DissipativityMeta> {
        let pm = p - 1.0;
        match self.kind {
            ModelKind::Pitchfork { gamma, sigma, noise } => {
                let alpha2 = 1.0;
                let s2 = sigma * sigma;
                let (alpha1, alpha3) = match noise {
                    PitchforkNoise::Additive => {
                        let h = ((alpha2 + gamma) / 2.0).max(0.0);
                        (gamma.max(0.0) + pm * s2 / 2.0, h * h + pm * s2 / 2.0)
                    }
                    PitchforkNoise::Linear => {
                        let h = (alpha2 + gamma + pm * s2 / 2.0).max(0.0);
                        ((gamma + pm * s2 / 2.0).max(0.0), 0.25 * h * h)
                    }
                    PitchforkNoise::Quadratic => {
                        if s2 >= 2.0 / pm {
                            return None;
                        }
                        let h = (gamma + alpha2).max(0.0);
                        // gamma x² - c x⁴ <= gamma²/(4c) (1 + x²) for the monotone bound
                        let c = 1.0 - pm * s2 / 2.0;
                        let g = gamma.max(0.0);
                        (g + g * g / (4.0 * c), h * h / (2.0 * (2.0 - pm * s2)))
                    }
                };
                Some(DissipativityMeta {
                    p,
                    alpha1: Some(alpha1.max(f64::MIN_POSITIVE)),
                    alpha2,
                    alpha3,
                })
            }
            ModelKind::Cir { kappa, theta, sigma } => {
                // -k x² + (k θ + (p-1)σ²/2) x <= -(k/2) x² + (k θ + (p-1)σ²/2)² / (2k)
                let lin = kappa * theta + pm * sigma * sigma / 2.0;
                Some(DissipativityMeta {
                    p,
                    alpha1: None,
                    alpha2: kappa / 2.0,
                    alpha3: lin * lin / (2.0 * kappa),
                })
            }
            ModelKind::Lorenz { rho, b, s, sigma11, sigma22, sigma33, .. } => {
                let a2_tilde = 0.5;
                // z-part of the weighted generator: s[-B z² + 2ρ b z] + α₂ s (z-2ρ)² with
                // B = b - (p-1)σ₃₃²/2, maximised over z at α₂ = α̃₂ B.
                let big_b = b - pm * sigma33 * sigma33 / 2.0;
                let alpha2 = (s - pm * sigma11 * sigma11 / 2.0)
                    .min(1.0 - pm * sigma22 * sigma22 / 2.0)
                    .min(a2_tilde * big_b);
                let alpha3 = s
                    * rho
                    * rho
                    * ((b - 2.0 * big_b).powi(2) / (big_b * (1.0 - a2_tilde)) + 4.0 * (b - big_b));
                Some(DissipativityMeta {
                    p,
                    alpha1: None,
                    alpha2,
                    alpha3,
                })
            }
            ModelKind::AllenCahn { gamma, d, .. } => {
                let (_, sigma) = self.allen_cahn_scales()?;
                let alpha2 = 1.0;
                let h = (alpha2 + gamma + pm * sigma * sigma / 2.0).max(0.0);
                Some(DissipativityMeta {
                    p,
                    alpha1: None,
                    alpha2,
                    alpha3: d as f64 * 0.25 * h * h,
                })
            }
            _ => None,
        }
    }

    pub fn remainder_meta(&self) -> Option<RemainderMeta> {
        match self.kind {
            ModelKind::Pitchfork { sigma, noise, .. } => {
                let c2 = match noise {
                    PitchforkNoise::Quadratic => 2.0 * sigma.abs(),
                    _ => 0.0,
                };
                Some(RemainderMeta { c1: 6.0, q1: 1.0, c2, q2: 0.0 })
            }
            ModelKind::Fold { .. } | ModelKind::Transcritical { .. } => {
                Some(RemainderMeta { c1: 2.0, q1: 0.0, c2: 0.0, q2: 0.0 })
            }
            ModelKind::Cir { .. } => None,
            ModelKind::Bistable2d { sigma13, sigma23, .. } => Some(RemainderMeta {
                c1: 6.0,
                q1: 1.0,
                c2: (2.0 * (sigma13 * sigma13 + sigma23 * sigma23)).sqrt(),
                q2: 0.0,
            }),
            ModelKind::Lorenz { sigma23, sigma32, .. } => Some(RemainderMeta {
                c1: 2.0,
                q1: 0.0,
                c2: 2f64.sqrt() * sigma23.abs().max(sigma32.abs()),
                q2: 0.0,
            }),
            ModelKind::AllenCahn { .. } => Some(RemainderMeta { c1: 6.0, q1: 1.0, c2: 0.0, q2: 0.0 }),
        }
    }

    /// Analytic equilibria as `(branch label, point)`, when known in closed form.
    pub fn equilibria(&self) -> Option<Vec<(String, Vec<f64>)>> {
        let one = |label: &str, x: Vec<f64>| (label.to_string(), x);
        match self.kind {
            ModelKind::Pitchfork { gamma, .. } => {
                let mut out = vec![one("zero", vec![0.0])];
                if gamma > 0.0 {
                    out.push(one("plus", vec![gamma.sqrt()]));
                    out.push(one("minus", vec![-gamma.sqrt()]));
                }
                Some(out)
            }
            ModelKind::Fold { gamma, .. } => {
                let mut out = Vec::new();
                if gamma > 0.0 {
                    out.push(one("plus", vec![gamma.sqrt()]));
                    out.push(one("minus", vec![-gamma.sqrt()]));
                }
                Some(out)
            }
            ModelKind::Transcritical { gamma, .. } => Some(vec![one("zero", vec![0.0]), one("gamma", vec![gamma])]),
            ModelKind::Cir { theta, .. } => Some(vec![one("theta", vec![theta])]),
            ModelKind::Bistable2d { .. } => None,
            ModelKind::Lorenz { rho, b, .. } => {
                let mut out = vec![one("origin", vec![0.0; 3])];
                if rho > 1.0 {
                    let k = (b * (rho - 1.0)).sqrt();
                    out.push(one("plus", vec![k, k, rho - 1.0]));
                    out.push(one("minus", vec![-k, -k, rho - 1.0]));
                }
                Some(out)
            }
            ModelKind::AllenCahn { gamma, d, .. } => {
                let mut out = vec![one("zero", vec![0.0; d])];
                if gamma > 0.0 {
                    out.push(one("plus", vec![gamma.sqrt(); d]));
                    out.push(one("minus", vec![-gamma.sqrt(); d]));
                }
                Some(out)
            }
        }
    }

    /// Evaluates `F(x)` into a fresh vector.
    pub fn drift_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.drift(x, &mut out);
        out
    }

    pub fn diffusion_matrix(&self, x: &[f64]) -> DenseMatrix {
        let mut g = DenseMatrix::zeros(self.dim(), self.noise_dim());
        self.diffusion(x, &mut g);
        g
    }

    fn analytic_jac_drift(&self, x: &[f64]) -> DenseMatrix {
        let d = self.dim();
        let mut j = DenseMatrix::zeros(d, d);
        match self.kind {
            ModelKind::Pitchfork { gamma, .. } => j[(0, 0)] = gamma - 3.0 * x[0] * x[0],
            ModelKind::Fold { .. } => j[(0, 0)] = -2.0 * x[0],
            ModelKind::Transcritical { gamma, .. } => j[(0, 0)] = gamma - 2.0 * x[0],
            ModelKind::Cir { kappa, .. } => j[(0, 0)] = -kappa,
            ModelKind::Bistable2d { .. } => {
                j[(0, 0)] = 1.0 - 3.0 * x[0] * x[0];
                j[(1, 1)] = -1.0;
            }
            ModelKind::Lorenz { rho, b, s, .. } => {
                let (xx, yy, zz) = (x[0], x[1], x[2]);
                j[(0, 0)] = -s;
                j[(0, 1)] = s;
                j[(1, 0)] = rho - zz;
                j[(1, 1)] = -1.0;
                j[(1, 2)] = -xx;
                j[(2, 0)] = yy;
                j[(2, 1)] = xx;
                j[(2, 2)] = -b;
            }
            ModelKind::AllenCahn { gamma, .. } => {
                j = self.allen_cahn_laplacian().expect("allen_cahn laplacian");
                for i in 0..d {
                    j[(i, i)] += gamma - 3.0 * x[i] * x[i];
                }
            }
        }
        j
    }

    fn analytic_jac_diffusion(&self, x: &[f64], col: usize) -> DenseMatrix {
        let d = self.dim();
        let mut j = DenseMatrix::zeros(d, d);
        match self.kind {
            ModelKind::Pitchfork { sigma, noise, .. } => {
                j[(0, 0)] = match noise {
                    PitchforkNoise::Additive => 0.0,
                    PitchforkNoise::Linear => sigma,
                    PitchforkNoise::Quadratic => 2.0 * sigma * x[0],
                }
            }
            ModelKind::Fold { sigma11, .. } | ModelKind::Transcritical { sigma11, .. } => {
                if col == 0 {
                    j[(0, 0)] = sigma11;
                }
            }
            ModelKind::Cir { sigma, .. } => {
                j[(0, 0)] = if x[0] > 0.0 { sigma / (2.0 * x[0].sqrt()) } else { 0.0 };
            }
            ModelKind::Bistable2d { sigma11, sigma13, sigma22, sigma23, .. } => match col {
                0 => j[(0, 0)] = sigma11,
                1 => j[(1, 1)] = sigma22,
                _ => {
                    j[(0, 0)] = sigma13 * x[1];
                    j[(0, 1)] = sigma13 * x[0];
                    j[(1, 0)] = sigma23 * x[1];
                    j[(1, 1)] = sigma23 * x[0];
                }
            },
            ModelKind::Lorenz { sigma11, sigma22, sigma33, sigma23, sigma32, .. } => match col {
                0 => j[(0, 0)] = sigma11,
                1 => {
                    j[(1, 1)] = sigma22;
                    j[(2, 0)] = sigma32 * x[1];
                    j[(2, 1)] = sigma32 * x[0];
                }
                _ => {
                    j[(1, 0)] = sigma23 * x[2];
                    j[(1, 2)] = sigma23 * x[0];
                    j[(2, 2)] = sigma33;
                }
            },
            ModelKind::AllenCahn { .. } => {
                let (_, sigma) = self.allen_cahn_scales().expect("allen_cahn scales");
                j[(col, col)] = sigma;
            }
        }
        j
    }

    fn fd_jacobian(&self, x: &[f64], target: JacobianTarget) -> DenseMatrix {
        let d = self.dim();
        let eval = |p: &[f64]| -> Vec<f64> {
            match target {
                JacobianTarget::Drift => self.drift_vec(p),
                JacobianTarget::DiffusionColumn(i) => self.diffusion_matrix(p).col(i).to_vec(),
            }
        };
        let base_step = f64::EPSILON.cbrt();
        let mut j = DenseMatrix::zeros(d, d);
        let mut xp = x.to_vec();
        for k in 0..d {
            let h = base_step * x[k].abs().max(1.0);
            xp[k] = x[k] + h;
            let fp = eval(&xp);
            xp[k] = x[k] - h;
            let fm = eval(&xp);
            xp[k] = x[k];
            for i in 0..d {
                j[(i, k)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        j
    }

    pub fn jacobian(&self, x: &[f64], target: JacobianTarget, mode: JacobianMode) -> Result<DenseMatrix, ModelError> {
        if let JacobianTarget::DiffusionColumn(i) = target {
            if i >= self.noise_dim() {
                return Err(ModelError::InvalidConfig(format!(
                    "diffusion column {i} out of range (m = {})",
                    self.noise_dim()
                )));
            }
        }
        match mode {
            JacobianMode::Analytic => {
                if !self.has_analytic_jacobian() {
                    return Err(ModelError::MissingAnalyticJacobian(self.name.clone()));
                }
                Ok(match target {
                    JacobianTarget::Drift => self.analytic_jac_drift(x),
                    JacobianTarget::DiffusionColumn(i) => self.analytic_jac_diffusion(x, i),
                })
            }
            JacobianMode::FiniteDifference => Ok(self.fd_jacobian(x, target)),
        }
    }

    /// Drift Jacobian, analytic when available.
    pub fn jac_drift(&self, x: &[f64]) -> DenseMatrix {
        let mode = if self.has_analytic_jacobian() {
            JacobianMode::Analytic
        } else {
            JacobianMode::FiniteDifference
        };
        self.jacobian(x, JacobianTarget::Drift, mode).expect("drift jacobian")
    }

    /// Diffusion Jacobians `DG_i(x)` for every noise column.
    pub fn jac_diffusion(&self, x: &[f64]) -> Vec<DenseMatrix> {
        let mode = if self.has_analytic_jacobian() {
            JacobianMode::Analytic
        } else {
            JacobianMode::FiniteDifference
        };
        (0..self.noise_dim())
            .map(|i| self.jacobian(x, JacobianTarget::DiffusionColumn(i), mode).expect("diffusion jacobian"))
            .collect()
    }

    pub fn check_equilibrium(&self, x: &[f64], tol: f64) -> bool {
        x.len() == self.dim() && norm(&self.drift_vec(x)) <= tol
    }
}

impl Sde for ModelSpec {
    fn dim(&self) -> usize {
        match self.kind {
            ModelKind::Pitchfork { .. }
            | ModelKind::Fold { .. }
            | ModelKind::Transcritical { .. }
            | ModelKind::Cir { .. } => 1,
            ModelKind::Bistable2d { .. } => 2,
            ModelKind::Lorenz { .. } => 3,
            ModelKind::AllenCahn { d, .. } => d,
        }
    }

    fn noise_dim(&self) -> usize {
        match self.kind {
            ModelKind::Pitchfork { .. } | ModelKind::Cir { .. } => 1,
            ModelKind::Fold { .. } | ModelKind::Transcritical { .. } => 2,
            ModelKind::Bistable2d { .. } | ModelKind::Lorenz { .. } => 3,
            ModelKind::AllenCahn { d, .. } => d,
        }
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        match self.kind {
            ModelKind::Pitchfork { gamma, .. } => out[0] = gamma * x[0] - x[0].powi(3),
            ModelKind::Fold { gamma, .. } => out[0] = gamma - x[0] * x[0],
            ModelKind::Transcritical { gamma, .. } => out[0] = x[0] * (gamma - x[0]),
            ModelKind::Cir { kappa, theta, .. } => out[0] = kappa * (theta - x[0]),
            ModelKind::Bistable2d { gamma, .. } => {
                out[0] = gamma + x[0] - x[0].powi(3);
                out[1] = -x[1];
            }
            ModelKind::Lorenz { rho, b, s, .. } => {
                out[0] = s * (x[1] - x[0]);
                out[1] = x[0] * (rho - x[2]) - x[1];
                out[2] = x[0] * x[1] - b * x[2];
            }
            ModelKind::AllenCahn { gamma, d, .. } => {
                let (dx, _) = self.allen_cahn_scales().expect("allen_cahn scales");
                let c = 1.0 / (dx * dx);
                for i in 0..d {
                    let left = x[(i + d - 1) % d];
                    let right = x[(i + 1) % d];
                    out[i] = c * (left - 2.0 * x[i] + right) + gamma * x[i] - x[i].powi(3);
                }
            }
        }
    }

    fn diffusion(&self, x: &[f64], g: &mut DenseMatrix) {
        g.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
        match self.kind {
            ModelKind::Pitchfork { sigma, noise, .. } => {
                g[(0, 0)] = match noise {
                    PitchforkNoise::Additive => sigma,
                    PitchforkNoise::Linear => sigma * x[0],
                    PitchforkNoise::Quadratic => sigma * x[0] * x[0],
                }
            }
            ModelKind::Fold { sigma11, sigma12, .. } | ModelKind::Transcritical { sigma11, sigma12, .. } => {
                g[(0, 0)] = sigma11 * x[0];
                g[(0, 1)] = sigma12;
            }
            ModelKind::Cir { sigma, .. } => g[(0, 0)] = sigma * x[0].max(0.0).sqrt(),
            ModelKind::Bistable2d { sigma11, sigma13, sigma22, sigma23, .. } => {
                g[(0, 0)] = sigma11 * x[0];
                g[(1, 1)] = sigma22 * x[1];
                g[(0, 2)] = sigma13 * x[0] * x[1];
                g[(1, 2)] = sigma23 * x[0] * x[1];
            }
            ModelKind::Lorenz { sigma11, sigma22, sigma33, sigma23, sigma32, .. } => {
                g[(0, 0)] = sigma11 * x[0];
                g[(1, 1)] = sigma22 * x[1];
                g[(1, 2)] = sigma23 * x[0] * x[2];
                g[(2, 1)] = sigma32 * x[0] * x[1];
                g[(2, 2)] = sigma33 * x[2];
            }
            ModelKind::AllenCahn { d, .. } => {
                let (_, sigma) = self.allen_cahn_scales().expect("allen_cahn scales");
                for i in 0..d {
                    g[(i, i)] = sigma * x[i];
                }
            }
        }
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pitchfork_defaults() {
        let m = builtin("pitchfork", Some("additive"), None).unwrap();
        assert_eq!((m.dim(), m.noise_dim()), (1, 1));
        assert_eq!(m.param("gamma"), Some(0.25));
        assert_eq!(m.param("sigma"), Some(0.1));
        assert!((m.drift_vec(&[0.5])[0]).abs() < 1e-15);
        assert_eq!(m.diffusion_matrix(&[3.0])[(0, 0)], 0.1);
    }

    #[test]
    fn cir_defaults_and_clamp() {
        let m = builtin("cir", None, None).unwrap();
        assert_eq!(m.param("kappa"), Some(2.0));
        assert_eq!(m.param("theta"), Some(0.02));
        assert_eq!(m.diffusion_matrix(&[-1.0])[(0, 0)], 0.0);
        assert!(m.remainder_meta().is_none());
    }

    #[test]
    fn allen_cahn_noise_scale() {
        let m = builtin("allen_cahn", None, Some(50)).unwrap();
        let (dx, sigma) = m.allen_cahn_scales().unwrap();
        assert!((dx - 2.0 * PI / 49.0).abs() < 1e-15);
        assert!((sigma - 0.1 / dx.sqrt()).abs() < 1e-15);
        assert!((sigma - 0.27930).abs() < 1e-4);
        let a = m.allen_cahn_laplacian().unwrap();
        for i in 0..50 {
            let row_sum: f64 = (0..50).map(|j| a[(i, j)]).sum();
            assert!(row_sum.abs() < 1e-9);
        }
    }

    #[test]
    fn unknown_names_are_rejected() {
        assert!(matches!(builtin("duffing", None, None), Err(ModelError::UnknownModel(_))));
        assert!(matches!(
            builtin("pitchfork", Some("cubic"), None),
            Err(ModelError::UnknownVariant { .. })
        ));
        assert!(builtin("lorenz", None, Some(4)).is_err());
        let m = builtin("pitchfork", None, None).unwrap();
        assert!(matches!(m.with_param("rho", 1.0), Err(ModelError::UnknownParameter { .. })));
    }

    #[test]
    fn jacobian_hand_values() {
        let m = builtin("pitchfork", None, None).unwrap();
        let j = m.jacobian(&[0.5], JacobianTarget::Drift, JacobianMode::Analytic).unwrap();
        assert!((j[(0, 0)] + 0.5).abs() < 1e-15);

        let cir = builtin("cir", None, None).unwrap().with_param("sigma", 0.2).unwrap();
        let dg = cir
            .jacobian(&[0.02], JacobianTarget::DiffusionColumn(0), JacobianMode::Analytic)
            .unwrap();
        assert!((dg[(0, 0)] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);

        let lz = builtin("lorenz", None, None).unwrap();
        let j = lz.jacobian(&[0.0; 3], JacobianTarget::Drift, JacobianMode::Analytic).unwrap();
        let expected = DenseMatrix::from_rows(&[&[-10.0, 10.0, 0.0], &[10.0, -1.0, 0.0], &[0.0, 0.0, -8.0 / 3.0]]);
        assert!(j.sub(&expected).max_abs() < 1e-15);
    }

    #[test]
    fn check_equilibrium_examples() {
        let m = builtin("pitchfork", None, None).unwrap();
        assert!(m.check_equilibrium(&[0.5], 1e-12));
        assert!(!m.check_equilibrium(&[0.4], 1e-12));
        assert!((m.drift_vec(&[0.4])[0] - 0.036).abs() < 1e-15);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let ok = ModelConfig::from_json(r#"{"model":"pitchfork","variant":"linear","params":{"gamma":0.3}}"#).unwrap();
        let m = ok.build().unwrap();
        assert_eq!(m.variant(), "linear");
        assert_eq!(m.param("gamma"), Some(0.3));
        assert!(ModelConfig::from_json(r#"{"model":"pitchfork","colour":"red"}"#).is_err());
        let ac = ModelConfig::from_json(r#"{"model":"allen_cahn","d":12}"#).unwrap().build().unwrap();
        assert_eq!(ac.dim(), 12);
    }

    #[test]
    fn lorenz_bound_metadata() {
        let diag = builtin("lorenz", Some("diagonal"), None).unwrap();
        assert_eq!(diag.lorenz_dissipativity_bound(), Some(f64::INFINITY));
        assert!(diag.invariant_domain().is_none());
        let nl = builtin("lorenz", Some("nonlinear"), None).unwrap();
        let k = nl.lorenz_dissipativity_bound().unwrap();
        assert!((k - (1.0 - 1e-4) / 1e-4).abs() < 1e-6);
    }
}
