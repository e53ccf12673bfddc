//! Text-conditioned latent mappers producing a residual `dw` for each group.
//!
//! Two architectures share one interface:
//! - `Attention`: positional encoding, then `L` blocks of modulated
//!   cross-attention and modulated MLP, each with a residual connection.
//!   The attention softmax runs over the latent positions (the column
//!   direction), because with a single text token a softmax over keys is
//!   identically one.
//! - `Baseline`: `L` row-wise blocks of linear, modulation and leaky ReLU.
//!
//! Both end in a zero-initialised projection, so an untrained mapper returns
//! `dw = 0` exactly.

mod params;

use serde::{Deserialize, Serialize};

pub use params::ParamStore;

use crate::embednet::EMBED_DIM;
use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::rng::{normal_tensor, stream_rng};
use crate::scalar::Scalar;
use crate::stylegen::{Group, GroupLayout, LatentStack};

pub const NORM_EPS: f64 = 1e-6;
pub const BASELINE_SLOPE: f64 = 0.2;
const MOD_INIT_STD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapperKind {
    Attention,
    Baseline,
}

impl MapperKind {
    pub fn name(self) -> &'static str {
        match self {
            MapperKind::Attention => "attention",
            MapperKind::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "attention" => Some(MapperKind::Attention),
            "baseline" => Some(MapperKind::Baseline),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapperConfig {
    pub kind: MapperKind,
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub layout: GroupLayout,
    /// Add the sinusoidal position code (attention mapper only).
    pub positional: bool,
}

impl Default for MapperConfig {
    fn default() -> Self {
        Self {
            kind: MapperKind::Attention,
            latent_dim: 8,
            embed_dim: EMBED_DIM,
            heads: 4,
            blocks: 6,
            layout: GroupLayout::default(),
            positional: true,
        }
    }
}

impl MapperConfig {
    pub fn baseline() -> Self {
        Self {
            kind: MapperKind::Baseline,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.latent_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.heads == 0 || self.latent_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "latent dim {} is not divisible by {} heads",
                self.latent_dim, self.heads
            )));
        }
        if self.blocks == 0 || self.embed_dim == 0 {
            return Err(Error::Config("mapper needs at least one block and a nonempty embedding".into()));
        }
        Ok(())
    }
}

fn pname(g: Group, rest: &str) -> String {
    format!("{}.{rest}", g.name())
}

/// Fresh mapper parameters; every array is drawn from its own stream.
pub fn init_params<T: Scalar>(cfg: &MapperConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let (d, e) = (cfg.latent_dim, cfg.embed_dim);
    let mut store = ParamStore::new();
    let mut counter = 0u64;
    let mut draw = |shape: &[usize], std: f64| {
        counter += 1;
        normal_tensor::<T>(&mut stream_rng(seed, 7, counter), shape, std)
    };
    let lin = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
    for g in Group::ALL {
        for l in 0..cfg.blocks {
            let norms: &[&str] = match cfg.kind {
                MapperKind::Attention => &["attn_norm", "mlp_norm"],
                MapperKind::Baseline => &["norm"],
            };
            for nm in norms {
                store.insert(pname(g, &format!("b{l}.{nm}.gamma_w")), draw(&[e, d], MOD_INIT_STD))?;
                store.insert(pname(g, &format!("b{l}.{nm}.gamma_b")), Tensor::zeros(&[d]))?;
                store.insert(pname(g, &format!("b{l}.{nm}.beta_w")), draw(&[e, d], MOD_INIT_STD))?;
                store.insert(pname(g, &format!("b{l}.{nm}.beta_b")), Tensor::zeros(&[d]))?;
            }
            match cfg.kind {
                MapperKind::Attention => {
                    store.insert(pname(g, &format!("b{l}.wq")), draw(&[d, d], lin(d)))?;
                    store.insert(pname(g, &format!("b{l}.wk")), draw(&[e, d], lin(e)))?;
                    store.insert(pname(g, &format!("b{l}.wv")), draw(&[e, d], lin(e)))?;
                    store.insert(pname(g, &format!("b{l}.wo")), draw(&[d, d], lin(d)))?;
                    store.insert(pname(g, &format!("b{l}.mlp_w1")), draw(&[d, 4 * d], lin(d)))?;
                    store.insert(pname(g, &format!("b{l}.mlp_b1")), Tensor::zeros(&[4 * d]))?;
                    store.insert(pname(g, &format!("b{l}.mlp_w2")), draw(&[4 * d, d], lin(4 * d)))?;
                    store.insert(pname(g, &format!("b{l}.mlp_b2")), Tensor::zeros(&[d]))?;
                }
                MapperKind::Baseline => {
                    store.insert(pname(g, &format!("b{l}.fc_w")), draw(&[d, d], lin(d)))?;
                    store.insert(pname(g, &format!("b{l}.fc_b")), Tensor::zeros(&[d]))?;
                }
            }
        }
        store.insert(pname(g, "out_w"), Tensor::zeros(&[d, d]))?;
        store.insert(pname(g, "out_b"), Tensor::zeros(&[d]))?;
    }
    Ok(store)
}

/// Sinusoidal code for layer indices `start..start + rows`, `[rows, dim]`.
pub fn positional_code<T: Scalar>(start: usize, rows: usize, dim: usize) -> Tensor<T> {
    let mut out = Vec::with_capacity(rows * dim);
    for i in start..start + rows {
        for k in 0..dim {
            let freq = 10000f64.powf(-((k / 2 * 2) as f64) / dim as f64);
            let a = i as f64 * freq;
            out.push(T::of(if k % 2 == 0 { a.sin() } else { a.cos() }));
        }
    }
    Tensor::new(&[rows, dim], out).expect("positional code shape")
}

/// Adds the position code of layers `start..` to the rows of `x`.
pub fn positional_encode<T: Scalar>(x: &Tensor<T>, start: usize) -> Result<Tensor<T>> {
    let (rows, dim) = (x.shape()[0], x.shape()[1]);
    Ok(x.add(&positional_code(start, rows, dim))?)
}

/// `[E] x [E, D] + [D]` as a `[1, D]` row.
fn affine<T: Scalar>(e: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let row = e.reshape(&[1, e.len()])?;
    Ok(row.matmul(w)?.add(b)?)
}

/// Row standardisation across `D`, then `x_hat * (1 + gamma(e)) - beta(e)`.
pub fn mod_norm<T: Scalar>(x: &Tensor<T>, e: &Tensor<T>, params: &ParamStore<T>, prefix: &str) -> Result<Tensor<T>> {
    let d = x.shape()[1];
    let rows = x.shape()[0];
    let mean = x.mean_axis(1)?.reshape(&[rows, 1])?;
    let centered = x.sub(&mean)?;
    let var = centered.square()?.mean_axis(1)?.reshape(&[rows, 1])?;
    let xhat = centered.div(&var.add_scalar(T::of(NORM_EPS))?.sqrt()?)?;
    let gamma = affine(e, params.get(&format!("{prefix}.gamma_w"))?, params.get(&format!("{prefix}.gamma_b"))?)?;
    let beta = affine(e, params.get(&format!("{prefix}.beta_w"))?, params.get(&format!("{prefix}.beta_b"))?)?;
    debug_assert_eq!(gamma.shape(), &[1, d]);
    Ok(xhat.mul(&gamma.add_scalar(T::one())?)?.sub(&beta)?)
}

/// Multi-head cross-attention from the latent rows to the single text token.
/// Returns the `[N, D]` output and each head's `[N, 1]` position weights.
pub fn cross_attention<T: Scalar>(
    x: &Tensor<T>,
    e: &Tensor<T>,
    wq: &Tensor<T>,
    wk: &Tensor<T>,
    wv: &Tensor<T>,
    wo: &Tensor<T>,
    heads: usize,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let d = x.shape()[1];
    let hd = d / heads;
    let row = e.reshape(&[1, e.len()])?;
    let q = x.matmul(wq)?;
    let k = row.matmul(wk)?;
    let v = row.matmul(wv)?;
    let inv = T::of(1.0 / (hd as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.narrow(1, h * hd, hd)?;
        let kh = k.narrow(1, h * hd, hd)?;
        let vh = v.narrow(1, h * hd, hd)?;
        let scores = qh.matmul(&kh.transpose()?)?.scale(inv)?;
        let a = scores.softmax_axis(0)?;
        outs.push(a.matmul(&vh)?);
        weights.push(a);
    }
    let refs: Vec<&Tensor<T>> = outs.iter().collect();
    let joined = if heads == 1 { outs[0].clone() } else { Tensor::concat(&refs, 1)? };
    Ok((joined.matmul(wo)?, weights))
}

fn silu<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(x.mul(&x.sigmoid()?)?)
}

#[derive(Debug, Clone)]
pub struct MapperOutput<T: Scalar> {
    /// `[N, D]`; rows of groups that were not run are zero.
    pub delta: Tensor<T>,
    /// Position weights per group, block and head.
    pub attention: Vec<Tensor<T>>,
}

fn check_inputs<T: Scalar>(w: &LatentStack<T>, e: &Tensor<T>, cfg: &MapperConfig) -> Result<()> {
    if w.latent_dim() != cfg.latent_dim || w.layout != cfg.layout {
        return Err(Error::ShapeMismatch {
            name: "latent stack".into(),
            expected: vec![cfg.layout.n_layers(), cfg.latent_dim],
            got: w.codes.shape().to_vec(),
        });
    }
    if e.shape() != [cfg.embed_dim] {
        return Err(Error::ShapeMismatch {
            name: "text embedding".into(),
            expected: vec![cfg.embed_dim],
            got: e.shape().to_vec(),
        });
    }
    Ok(())
}

fn attention_group<T: Scalar>(
    x0: &Tensor<T>,
    start: usize,
    e: &Tensor<T>,
    p: &ParamStore<T>,
    cfg: &MapperConfig,
    g: Group,
    trace: &mut Vec<Tensor<T>>,
) -> Result<Tensor<T>> {
    let mut x = if cfg.positional { positional_encode(x0, start)? } else { x0.clone() };
    for l in 0..cfg.blocks {
        let n = mod_norm(&x, e, p, &pname(g, &format!("b{l}.attn_norm")))?;
        let get = |s: &str| p.get(&pname(g, &format!("b{l}.{s}")));
        let (a, weights) = cross_attention(&n, e, get("wq")?, get("wk")?, get("wv")?, get("wo")?, cfg.heads)?;
        trace.extend(weights);
        x = x.add(&a)?;
        let n = mod_norm(&x, e, p, &pname(g, &format!("b{l}.mlp_norm")))?;
        let hidden = silu(&n.matmul(get("mlp_w1")?)?.add(get("mlp_b1")?)?)?;
        x = x.add(&hidden.matmul(get("mlp_w2")?)?.add(get("mlp_b2")?)?)?;
    }
    Ok(x)
}

fn baseline_group<T: Scalar>(x0: &Tensor<T>, e: &Tensor<T>, p: &ParamStore<T>, cfg: &MapperConfig, g: Group) -> Result<Tensor<T>> {
    let mut x = x0.clone();
    for l in 0..cfg.blocks {
        let get = |s: &str| p.get(&pname(g, &format!("b{l}.{s}")));
        let h = x.matmul(get("fc_w")?)?.add(get("fc_b")?)?;
        let h = mod_norm(&h, e, p, &pname(g, &format!("b{l}.norm")))?;
        x = h.leaky_relu(T::of(BASELINE_SLOPE))?;
    }
    Ok(x)
}

/// Runs the mappers of `groups` and assembles `dw`. Rows of other groups are
/// zero and independent of their parameters.
pub fn forward_groups<T: Scalar>(
    w: &LatentStack<T>,
    e: &Tensor<T>,
    params: &ParamStore<T>,
    cfg: &MapperConfig,
    groups: &[Group],
) -> Result<MapperOutput<T>> {
    check_inputs(w, e, cfg)?;
    let mut parts = Vec::with_capacity(3);
    let mut attention = Vec::new();
    for g in Group::ALL {
        let range = cfg.layout.range(g);
        if !groups.contains(&g) {
            parts.push(Tensor::zeros(&[range.len(), cfg.latent_dim]));
            continue;
        }
        let x0 = w.group(g)?;
        let x = match cfg.kind {
            MapperKind::Attention => attention_group(&x0, range.start, e, params, cfg, g, &mut attention)?,
            MapperKind::Baseline => baseline_group(&x0, e, params, cfg, g)?,
        };
        parts.push(x.matmul(params.get(&pname(g, "out_w"))?)?.add(params.get(&pname(g, "out_b"))?)?);
    }
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    Ok(MapperOutput {
        delta: Tensor::concat(&refs, 0)?,
        attention,
    })
}

/// Attention mapper over all groups.
pub fn mapper_forward<T: Scalar>(w: &LatentStack<T>, e: &Tensor<T>, params: &ParamStore<T>, cfg: &MapperConfig) -> Result<MapperOutput<T>> {
    if cfg.kind != MapperKind::Attention {
        return Err(Error::Config("mapper_forward needs an attention mapper config".into()));
    }
    forward_groups(w, e, params, cfg, &Group::ALL)
}

/// Baseline mapper over all groups.
pub fn baseline_forward<T: Scalar>(w: &LatentStack<T>, e: &Tensor<T>, params: &ParamStore<T>, cfg: &MapperConfig) -> Result<Tensor<T>> {
    if cfg.kind != MapperKind::Baseline {
        return Err(Error::Config("baseline_forward needs a baseline mapper config".into()));
    }
    Ok(forward_groups(w, e, params, cfg, &Group::ALL)?.delta)
}
