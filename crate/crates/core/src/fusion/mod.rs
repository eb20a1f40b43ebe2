//! Uncertainty-routed mixture of modality experts.
//!
//! Each expert cross-attends from its modality tokens (queries) to the LR
//! latent (keys/values) with a scheduled temperature. A small mixer turns the
//! latent plus the per-patch uncertainty into independent sigmoid weights, one
//! per modality and patch, and the fused feature is
//! `h = z_x + Σ_m w^m ⊙ E_m(z_x, m_m)`. The static baseline replaces the
//! router by one learned scalar per modality.
//!
//! Parameters live in a flat [`ParamSet`] under stable names:
//! `expert.{modality}.{w_q,w_k,w_v,temp_w,temp_b}`, `router.*`,
//! `static.logits`.

mod temperature;

pub use temperature::{schedule, temperature, time_embedding, TemperatureEval, TAU_MAX, TAU_MIN};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, ParamSet, Rng, Tape, Tensor, Var};
use crate::synth::{Modality, ModalityBundle, UncertaintyMap};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemperatureMode {
    /// Learned `τ_m(t)`.
    Scheduled,
    /// `τ ≡ 1`: plain scaled dot-product attention.
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionDims {
    /// Modality token width `d`.
    pub token_dim: usize,
    /// Latent width `d_h`.
    pub latent_dim: usize,
    /// Attention width `d_a`.
    pub attn_dim: usize,
    /// Router mixer width `d_r`.
    pub router_dim: usize,
    pub router_blocks: usize,
    pub time_dim: usize,
    /// Uncertainty quantile buckets fed to the router.
    pub buckets: usize,
}

impl Default for FusionDims {
    fn default() -> Self {
        FusionDims {
            token_dim: 16,
            latent_dim: 16,
            attn_dim: 8,
            router_dim: 16,
            router_blocks: 2,
            time_dim: 8,
            buckets: 8,
        }
    }
}

/// Per-(modality, patch) router weights in `(0,1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterOutput {
    /// `[M × N_p]`
    pub weights: Tensor,
    pub uncertainty: UncertaintyMap,
}

/// Sample-independent per-modality weights `w̄`.
#[derive(Clone, Debug, PartialEq)]
pub struct StaticWeights {
    /// `[M]`
    pub values: Tensor,
}

/// How expert outputs are weighted before the residual sum.
#[derive(Clone, Copy, Debug)]
pub enum Weighting {
    /// `[M × N_p]` node.
    PerPatch(Var),
    /// `[M]` node.
    Static(Var),
}

/// Architecture of the fusion layer; the weights themselves live in a
/// [`ParamSet`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionLayer {
    pub dims: FusionDims,
    pub modalities: Vec<Modality>,
    pub temperature: TemperatureMode,
}

pub fn expert_prefix(m: Modality) -> String {
    format!("expert.{m}")
}

pub const STATIC_LOGITS: &str = "static.logits";

fn normal(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal() * std)
}

/// `[N_p × (1 + buckets)]`: raw uncertainty then a one-hot quantile bucket.
pub fn router_features(u: &UncertaintyMap, buckets: usize) -> Tensor {
    let n = u.len();
    let b = u.quantile_buckets(buckets);
    let mut data = vec![0.0; n * (1 + buckets)];
    for i in 0..n {
        data[i * (1 + buckets)] = u.values.data()[i];
        data[i * (1 + buckets) + 1 + b[i]] = 1.0;
    }
    Tensor::new(vec![n, 1 + buckets], data).expect("nonempty uncertainty map")
}

impl FusionLayer {
    pub fn new(dims: FusionDims, modalities: Vec<Modality>, temperature: TemperatureMode) -> Self {
        FusionLayer {
            dims,
            modalities,
            temperature,
        }
    }

    pub fn n_modalities(&self) -> usize {
        self.modalities.len()
    }

    /// Fresh parameters for experts, router and static weights. Router and
    /// static weights start at 0.5; temperatures start at the constant
    /// schedule `τ ≡ 0.5`.
    pub fn init(&self, rng: &mut Rng) -> ParamSet {
        let d = &self.dims;
        let mut p = ParamSet::new();
        for &m in &self.modalities {
            let pre = expert_prefix(m);
            let (dt, dh) = (d.token_dim as f64, d.latent_dim as f64);
            p.insert(format!("{pre}.w_q"), normal(rng, &[d.token_dim, d.attn_dim], dt.powf(-0.5)));
            p.insert(format!("{pre}.w_k"), normal(rng, &[d.latent_dim, d.attn_dim], dh.powf(-0.5)));
            p.insert(
                format!("{pre}.w_v"),
                normal(rng, &[d.latent_dim, d.latent_dim], 0.5 * dh.powf(-0.5)),
            );
            if self.temperature == TemperatureMode::Scheduled {
                temperature::init(&mut p, &pre, d.time_dim);
            }
        }
        let r = d.router_dim;
        let rs = (r as f64).powf(-0.5);
        let fin = d.latent_dim + 1 + d.buckets;
        p.insert("router.in_w", normal(rng, &[fin, r], (fin as f64).powf(-0.5)));
        p.insert("router.in_b", Tensor::zeros(&[r]));
        for b in 0..d.router_blocks {
            let pre = format!("router.block{b}");
            for name in ["w_q", "w_k", "w_v"] {
                p.insert(format!("{pre}.{name}"), normal(rng, &[r, r], rs));
            }
            p.insert(format!("{pre}.w_o"), normal(rng, &[r, r], 0.5 * rs));
            p.insert(format!("{pre}.mlp_w1"), normal(rng, &[r, 2 * r], rs));
            p.insert(format!("{pre}.mlp_b1"), Tensor::zeros(&[2 * r]));
            p.insert(
                format!("{pre}.mlp_w2"),
                normal(rng, &[2 * r, r], 0.5 * (2.0 * r as f64).powf(-0.5)),
            );
            p.insert(format!("{pre}.mlp_b2"), Tensor::zeros(&[r]));
        }
        let m = self.n_modalities();
        p.insert("router.head_w", normal(rng, &[r, m], 0.1 * rs));
        p.insert("router.head_b", Tensor::zeros(&[m]));
        p.insert(STATIC_LOGITS, Tensor::zeros(&[m]));
        p
    }

    fn modality_index(&self, m: Modality) -> Result<usize> {
        self.modalities.iter().position(|&k| k == m).ok_or(Error::Lookup {
            kind: "modality",
            name: m.name().to_string(),
        })
    }

    /// `τ_m(t)`, or the constant 1 when temperatures are not learned.
    pub fn temperature(&self, params: &ParamSet, m: Modality, t: f64) -> Result<TemperatureEval> {
        self.modality_index(m)?;
        match self.temperature {
            TemperatureMode::Scheduled => temperature(params, &expert_prefix(m), t),
            TemperatureMode::Fixed => {
                if !(0.0..=1.0).contains(&t) {
                    return Err(Error::Domain(format!("timestep {t} outside [0,1]")));
                }
                Ok(TemperatureEval {
                    alpha: f64::NAN,
                    beta: f64::NAN,
                    pre_clamp: 1.0,
                    tau: 1.0,
                })
            }
        }
    }

    /// Single-head cross-attention
    /// `softmax(Q(m_m) K(z_x)ᵀ / (τ_m(t)·√d_a)) V(z_x)` on `tape`.
    pub fn expert_tape(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        m: Modality,
        z: Var,
        tokens: Var,
        t: f64,
    ) -> Result<Var> {
        let (zt, mt) = (tape.value(z), tape.value(tokens));
        if zt.rows() != mt.rows() {
            return Err(Error::dim("expert_forward", zt.shape(), mt.shape()));
        }
        let pre = expert_prefix(m);
        let wq = tape.param(&format!("{pre}.w_q"), params.get(&format!("{pre}.w_q"))?);
        let wk = tape.param(&format!("{pre}.w_k"), params.get(&format!("{pre}.w_k"))?);
        let wv = tape.param(&format!("{pre}.w_v"), params.get(&format!("{pre}.w_v"))?);
        let q = tape.matmul(tokens, wq)?;
        let k = tape.matmul(z, wk)?;
        let v = tape.matmul(z, wv)?;
        let kt = tape.transpose(k)?;
        let logits = tape.matmul(q, kt)?;
        let root_da = (self.dims.attn_dim as f64).sqrt();
        let scaled = match self.temperature {
            TemperatureMode::Scheduled => {
                let (tau, _) = temperature::temperature_on_tape(tape, params, &pre, t)?;
                let denom = tape.scale(tau, root_da);
                tape.div_scalar(logits, denom)?
            }
            TemperatureMode::Fixed => {
                if !(0.0..=1.0).contains(&t) {
                    return Err(Error::Domain(format!("timestep {t} outside [0,1]")));
                }
                tape.scale(logits, 1.0 / root_da)
            }
        };
        let attn = tape.softmax_rows(scaled, 1.0)?;
        tape.matmul(attn, v)
    }

    /// Router mixer on `tape`; returns `[M × N_p]` sigmoid weights.
    pub fn route_tape(&self, tape: &mut Tape, params: &ParamSet, z: Var, features: &Tensor) -> Result<Var> {
        let n = tape.value(z).rows();
        if features.rows() != n || features.cols() != 1 + self.dims.buckets {
            return Err(Error::dim("route", tape.value(z).shape(), features.shape()));
        }
        let p = |tape: &mut Tape, name: &str| -> Result<Var> { Ok(tape.param(name, params.get(name)?)) };
        let f = tape.constant(features.clone());
        let x = tape.concat_cols(z, f)?;
        let w = p(tape, "router.in_w")?;
        let b = p(tape, "router.in_b")?;
        let x = tape.matmul(x, w)?;
        let mut x = tape.add_row(x, b)?;
        let inv_root = 1.0 / (self.dims.router_dim as f64).sqrt();
        for blk in 0..self.dims.router_blocks {
            let pre = format!("router.block{blk}");
            let a = tape.layer_norm_rows(x, LN_EPS)?;
            let wq = p(tape, &format!("{pre}.w_q"))?;
            let wk = p(tape, &format!("{pre}.w_k"))?;
            let wv = p(tape, &format!("{pre}.w_v"))?;
            let wo = p(tape, &format!("{pre}.w_o"))?;
            let q = tape.matmul(a, wq)?;
            let k = tape.matmul(a, wk)?;
            let v = tape.matmul(a, wv)?;
            let kt = tape.transpose(k)?;
            let logits = tape.matmul(q, kt)?;
            let logits = tape.scale(logits, inv_root);
            let attn = tape.softmax_rows(logits, 1.0)?;
            let mixed = tape.matmul(attn, v)?;
            let mixed = tape.matmul(mixed, wo)?;
            x = tape.add(x, mixed)?;

            let a = tape.layer_norm_rows(x, LN_EPS)?;
            let w1 = p(tape, &format!("{pre}.mlp_w1"))?;
            let b1 = p(tape, &format!("{pre}.mlp_b1"))?;
            let w2 = p(tape, &format!("{pre}.mlp_w2"))?;
            let b2 = p(tape, &format!("{pre}.mlp_b2"))?;
            let hdn = tape.matmul(a, w1)?;
            let hdn = tape.add_row(hdn, b1)?;
            let hdn = tape.gelu(hdn);
            let out = tape.matmul(hdn, w2)?;
            let out = tape.add_row(out, b2)?;
            x = tape.add(x, out)?;
        }
        let hw = p(tape, "router.head_w")?;
        let hb = p(tape, "router.head_b")?;
        let logits = tape.matmul(x, hw)?;
        let logits = tape.add_row(logits, hb)?;
        let w = tape.sigmoid(logits);
        tape.transpose(w)
    }

    /// `sigmoid(static.logits)` on `tape`.
    pub fn static_tape(&self, tape: &mut Tape, params: &ParamSet) -> Result<Var> {
        let logits = tape.param(STATIC_LOGITS, params.get(STATIC_LOGITS)?);
        if tape.value(logits).numel() != self.n_modalities() {
            return Err(Error::Contract(format!(
                "{} static weights for {} modalities",
                tape.value(logits).numel(),
                self.n_modalities()
            )));
        }
        Ok(tape.sigmoid(logits))
    }

    /// Residual sum `z + Σ_m w^m ⊙ E_m` in modality order.
    pub fn combine_tape(&self, tape: &mut Tape, z: Var, experts: &[Var], weighting: Weighting) -> Result<Var> {
        let m = experts.len();
        let n = tape.value(z).rows();
        let expect = match weighting {
            Weighting::PerPatch(w) => (tape.value(w).shape().to_vec(), vec![m, n]),
            Weighting::Static(w) => (tape.value(w).shape().to_vec(), vec![m]),
        };
        if m != self.n_modalities() || expect.0 != expect.1 {
            return Err(Error::Contract(format!(
                "{m} experts with weights {:?} for {} modalities and {n} patches",
                expect.0,
                self.n_modalities()
            )));
        }
        let mut h = z;
        for (k, &e) in experts.iter().enumerate() {
            let weighted = match weighting {
                Weighting::PerPatch(w) => {
                    let col = tape.gather(w, (k * n..(k + 1) * n).collect(), &[n])?;
                    tape.mul_col(e, col)?
                }
                Weighting::Static(w) => {
                    let s = tape.gather(w, vec![k], &[1])?;
                    tape.mul_scalar(e, s)?
                }
            };
            h = tape.add(h, weighted)?;
        }
        Ok(h)
    }

    /// Every expert's output, in modality order.
    pub fn experts_tape(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        z: Var,
        bundle: &ModalityBundle,
        t: f64,
    ) -> Result<Vec<Var>> {
        if bundle.modalities() != self.modalities {
            return Err(Error::Contract(format!(
                "bundle modalities {:?} do not match layer {:?}",
                bundle.modalities(),
                self.modalities
            )));
        }
        bundle
            .entries
            .iter()
            .map(|e| {
                let tok = tape.constant(e.tokens.clone());
                self.expert_tape(tape, params, e.modality, z, tok, t)
            })
            .collect()
    }

    pub fn expert_forward(
        &self,
        z_x: &Tensor,
        tokens: &Tensor,
        params: &ParamSet,
        m: Modality,
        t: f64,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let z = tape.constant(z_x.clone());
        let tok = tape.constant(tokens.clone());
        let out = self.expert_tape(&mut tape, params, m, z, tok, t)?;
        Ok(tape.value(out).clone())
    }

    pub fn route(&self, lr_latent: &Tensor, u: &UncertaintyMap, params: &ParamSet) -> Result<RouterOutput> {
        if u.len() != lr_latent.rows() {
            return Err(Error::dim("route", lr_latent.shape(), u.values.shape()));
        }
        let mut tape = Tape::new();
        let z = tape.constant(lr_latent.clone());
        let w = self.route_tape(&mut tape, params, z, &router_features(u, self.dims.buckets))?;
        Ok(RouterOutput {
            weights: tape.value(w).clone(),
            uncertainty: u.clone(),
        })
    }

    pub fn static_weights(&self, params: &ParamSet) -> Result<StaticWeights> {
        let logits = params.get(STATIC_LOGITS)?;
        Ok(StaticWeights {
            values: logits.map(sigmoid),
        })
    }

    pub fn fuse_moe(
        &self,
        z_x: &Tensor,
        bundle: &ModalityBundle,
        params: &ParamSet,
        router: &RouterOutput,
        t: f64,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let z = tape.constant(z_x.clone());
        let experts = self.experts_tape(&mut tape, params, z, bundle, t)?;
        let w = tape.constant(router.weights.clone());
        let h = self.combine_tape(&mut tape, z, &experts, Weighting::PerPatch(w))?;
        Ok(tape.value(h).clone())
    }

    pub fn fuse_static(
        &self,
        z_x: &Tensor,
        bundle: &ModalityBundle,
        params: &ParamSet,
        wbar: &StaticWeights,
        t: f64,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let z = tape.constant(z_x.clone());
        let experts = self.experts_tape(&mut tape, params, z, bundle, t)?;
        let w = tape.constant(wbar.values.clone());
        let h = self.combine_tape(&mut tape, z, &experts, Weighting::Static(w))?;
        Ok(tape.value(h).clone())
    }
}
