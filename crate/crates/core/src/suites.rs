//! Registered finite-difference suites, grouped by scope.
//!
//! Each case builds its inputs from fixed seeds, so a run is reproducible and
//! the table it produces has one row per registered case.

use std::fmt;
use std::str::FromStr;

use crate::editops::{background_loss, clip_loss, directional_loss, norm_loss, total_loss, EditContext, LossWeights, Original};
use crate::embednet::{embed_image, embed_text, Lexicon, EMBED_DIM, SUBJECT};
use crate::error::{Error, Result};
use crate::mapper::{cross_attention, forward_groups, init_params, mod_norm, MapperConfig, MapperKind, ParamStore};
use crate::ndgrad::gradcheck::{check, CheckOptions, GradReport};
use crate::ndgrad::{NdResult, ReduceKind, Tensor};
use crate::rng::{normal_tensor, stream_rng};
use crate::stylegen::{
    render, AvatarParams, BodyPart, EditKind, EditTarget, GeneratorConfig, GeneratorParams, Group, GroupLayout, LatentStack,
};

/// Tolerance for checks whose path runs through the renderer.
pub const RENDER_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scope {
    Ops,
    Generator,
    Mapper,
    Losses,
}

impl Scope {
    pub const ALL: [Scope; 4] = [Scope::Ops, Scope::Generator, Scope::Mapper, Scope::Losses];

    pub fn name(self) -> &'static str {
        match self {
            Scope::Ops => "ops",
            Scope::Generator => "generator",
            Scope::Mapper => "mapper",
            Scope::Losses => "losses",
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scope::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradcheck scope `{s}`")))
    }
}

type Run = Box<dyn Fn() -> Result<GradReport> + Send + Sync>;

pub struct Case {
    pub scope: Scope,
    pub name: String,
    run: Run,
}

impl Case {
    fn new(scope: Scope, name: impl Into<String>, run: impl Fn() -> Result<GradReport> + Send + Sync + 'static) -> Self {
        Self {
            scope,
            name: name.into(),
            run: Box::new(run),
        }
    }

    pub fn run(&self) -> Result<GradReport> {
        (self.run)()
    }
}

#[derive(Debug, Clone)]
pub struct Row {
    pub scope: Scope,
    pub report: GradReport,
}

fn uniform(seed: u64, k: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    use rand::Rng;
    let mut rng = stream_rng(seed, 41, k);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Magnitudes in [0.1, 2] with random sign, clear of the kink at zero.
fn off_zero(seed: u64, k: u64, shape: &[usize]) -> Tensor<f64> {
    let m = uniform(seed, k, shape, 0.1, 2.0);
    let s = uniform(seed, k + 1000, shape, -1.0, 1.0);
    let d = m.data().iter().zip(s.data()).map(|(a, b)| a.copysign(*b)).collect();
    Tensor::new(shape, d).expect("shape")
}

type OpFn = fn(&[Tensor<f64>]) -> NdResult<Tensor<f64>>;

fn op_cases() -> Vec<Case> {
    const S: &[usize] = &[3, 4];
    let sym = |k| uniform(11, k, S, -2.0, 2.0);
    let pos = |k| uniform(11, k, S, 0.5, 2.0);
    let table: Vec<(&str, Vec<Tensor<f64>>, OpFn)> = vec![
        ("add", vec![sym(0), sym(1)], |x| x[0].add(&x[1])),
        ("sub", vec![sym(2), sym(3)], |x| x[0].sub(&x[1])),
        ("mul", vec![sym(4), sym(5)], |x| x[0].mul(&x[1])),
        ("div", vec![sym(6), pos(7)], |x| x[0].div(&x[1])),
        ("pow", vec![pos(8), sym(9)], |x| x[0].pow(&x[1])),
        ("exp", vec![sym(10)], |x| x[0].exp()),
        ("log", vec![pos(11)], |x| x[0].log()),
        ("tanh", vec![sym(12)], |x| x[0].tanh()),
        ("sigmoid", vec![sym(13)], |x| x[0].sigmoid()),
        ("sqrt", vec![pos(14)], |x| x[0].sqrt()),
        ("relu", vec![off_zero(11, 15, S)], |x| x[0].relu()),
        ("leaky_relu", vec![off_zero(11, 16, S)], |x| x[0].leaky_relu(0.2)),
        ("abs", vec![off_zero(11, 17, S)], |x| x[0].abs()),
        ("neg", vec![sym(18)], |x| x[0].neg()),
        ("scale", vec![sym(19)], |x| x[0].scale(-1.7)),
        ("add_scalar", vec![sym(20)], |x| x[0].add_scalar(0.3)),
        ("powf", vec![pos(21)], |x| x[0].powf(2.5)),
        ("square", vec![sym(22)], |x| x[0].square()),
        ("softmax_axis0", vec![sym(23)], |x| x[0].softmax_axis(0)),
        ("softmax_axis1", vec![sym(24)], |x| x[0].softmax_axis(1)),
        ("broadcast_row", vec![sym(25), uniform(11, 26, &[4], -2.0, 2.0)], |x| x[0].mul(&x[1])),
        ("broadcast_col", vec![sym(27), uniform(11, 28, &[3, 1], -2.0, 2.0)], |x| x[0].div(&x[1].exp()?)),
        ("matmul", vec![sym(29), uniform(11, 30, &[4, 4], -2.0, 2.0)], |x| x[0].matmul(&x[1])),
        ("transpose", vec![uniform(11, 31, &[4, 3], -2.0, 2.0)], |x| x[0].transpose()),
        ("reshape", vec![uniform(11, 32, &[12], -2.0, 2.0)], |x| x[0].reshape(&[3, 4])),
        ("narrow_concat", vec![sym(33)], |x| {
            let a = x[0].narrow(1, 0, 1)?;
            let b = x[0].narrow(1, 1, 3)?.tanh()?;
            Tensor::concat(&[&a, &b], 1)
        }),
        ("smooth3", vec![sym(34)], |x| x[0].smooth3(1)),
        ("sum_axis", vec![sym(35)], |x| x[0].sum_axis(0)?.tanh()),
        ("mean_axis", vec![sym(36)], |x| x[0].mean_axis(1)?.square()?.reshape(&[3, 1])),
        ("l2norm_axis", vec![sym(37)], |x| x[0].reduce(ReduceKind::L2Norm, Some(1))?.reshape(&[3, 1])),
        ("mean", vec![sym(38)], |x| x[0].mul(&x[0].mean()?)),
        ("l2norm", vec![sym(39)], |x| x[0].mul(&x[0].l2norm()?)),
        ("dot", vec![sym(40), sym(41)], |x| x[0].mul(&x[0].reshape(&[12])?.dot(&x[1].reshape(&[12])?)?)),
    ];
    // weight the [3,4] output by a fixed random matrix so every entry matters
    let probe = uniform(11, 99, S, -1.0, 1.0);
    table
        .into_iter()
        .map(|(name, inputs, f)| {
            let probe = probe.clone();
            Case::new(Scope::Ops, name, move || {
                Ok(check(name, &inputs, |x| f(x)?.mul(&probe)?.sum(), &CheckOptions::default())?)
            })
        })
        .collect()
}

fn tiny_generator() -> Result<GeneratorParams<f64>> {
    GeneratorParams::build(&GeneratorConfig::tiny(4))
}

fn latent(g: &GeneratorParams<f64>, seed: u64) -> Result<LatentStack<f64>> {
    g.map_to_w(&g.sample_z(seed, 1)[0])
}

fn generator_cases() -> Vec<Case> {
    let mut out = Vec::new();
    out.push(Case::new(Scope::Generator, "decode_params", || {
        let g = tiny_generator()?;
        let w = latent(&g, 8)?;
        let layout = g.layout().clone();
        let probe = uniform(5, 0, &[4 + 3 + 15], -1.0, 1.0);
        check(
            "decode_params",
            &[w.codes.clone()],
            |x| {
                let a = g.decode_params(&LatentStack::new(x[0].clone(), layout.clone())?)?;
                let flat = Tensor::concat(&[&a.body, &a.garment, &a.colors.reshape(&[15])?], 0)?;
                Ok(flat.dot(&probe)?)
            },
            &CheckOptions::default(),
        )
    }));
    out.push(Case::new(Scope::Generator, "render/colors", || {
        let g = tiny_generator()?;
        let base = AvatarParams::<f64>::nominal();
        let (h, w) = (g.config.render.height, g.config.render.width);
        let probe = uniform(5, 1, &[3, h, w], -0.5, 0.5);
        check(
            "render/colors",
            &[base.colors.clone()],
            |x| {
                let a = AvatarParams {
                    colors: x[0].clone(),
                    ..base.clone()
                };
                Ok(render(&a, &g, &[])?.image.mul(&probe)?.sum()?)
            },
            &CheckOptions::with_tolerance(RENDER_TOLERANCE),
        )
    }));
    out.push(Case::new(Scope::Generator, "render/shape", || {
        let g = tiny_generator()?;
        let base = AvatarParams::<f64>::nominal();
        let (h, w) = (g.config.render.height, g.config.render.width);
        let probe = uniform(5, 2, &[3, h, w], -0.5, 0.5);
        check(
            "render/shape",
            &[base.body.clone(), base.garment.clone()],
            |x| {
                let a = AvatarParams {
                    body: x[0].clone(),
                    garment: x[1].clone(),
                    colors: base.colors.clone(),
                };
                Ok(render(&a, &g, &[])?.image.mul(&probe)?.sum()?)
            },
            &CheckOptions::with_tolerance(RENDER_TOLERANCE),
        )
    }));
    out.push(Case::new(Scope::Generator, "generate", || {
        let g = tiny_generator()?;
        let w = latent(&g, 2)?;
        let layout = g.layout().clone();
        let (h, wd) = (g.config.render.height, g.config.render.width);
        let probe = uniform(5, 3, &[3, h, wd], -0.5, 0.5);
        let opts = CheckOptions {
            max_coords: Some(32),
            seed: 4,
            ..CheckOptions::with_tolerance(RENDER_TOLERANCE)
        };
        check(
            "generate",
            &[w.codes.clone()],
            |x| Ok(g.generate(&LatentStack::new(x[0].clone(), layout.clone())?)?.image.mul(&probe)?.sum()?),
            &opts,
        )
    }));
    out.push(Case::new(Scope::Generator, "embed_image", || {
        let g = tiny_generator()?;
        let img = render(&AvatarParams::nominal(), &g, &[])?.image;
        let img = Tensor::new(img.shape(), img.data().iter().map(|v| 0.05 + 0.9 * v).collect())?;
        let probe = uniform(5, 4, &[EMBED_DIM], -1.0, 1.0);
        check(
            "embed_image",
            &[img],
            |x| {
                let e = embed_image(&x[0])?;
                Ok(e.vector.dot(&probe)?.add(&e.raw_attributes.dot(&probe)?)?)
            },
            &CheckOptions::default(),
        )
    }));
    out
}

fn small_mapper(kind: MapperKind) -> MapperConfig {
    MapperConfig {
        kind,
        latent_dim: 4,
        embed_dim: EMBED_DIM,
        heads: 2,
        blocks: 1,
        layout: GroupLayout::new(1, 1, 2).expect("layout"),
        positional: true,
    }
}

/// Every array redrawn so the zero-initialised output projection is live.
fn randomized(store: &ParamStore<f64>, seed: u64) -> ParamStore<f64> {
    let mut k = 0;
    store.map(|_, v| {
        k += 1;
        normal_tensor(&mut stream_rng(seed, 99, k), v.shape(), 0.4)
    })
}

fn unit_embedding(seed: u64) -> Result<Tensor<f64>> {
    let e = normal_tensor::<f64>(&mut stream_rng(seed, 6, 0), &[EMBED_DIM], 1.0);
    Ok(e.div(&e.l2norm()?)?)
}

fn mapper_cases() -> Vec<Case> {
    let mut out = Vec::new();
    out.push(Case::new(Scope::Mapper, "mod_norm", || {
        let mut p = ParamStore::new();
        for (s, shape) in [("gamma_w", vec![EMBED_DIM, 8]), ("beta_w", vec![EMBED_DIM, 8]), ("gamma_b", vec![8]), ("beta_b", vec![8])] {
            p.insert(format!("m.{s}"), Tensor::zeros(&shape))?;
        }
        let p = randomized(&p, 3);
        let x = normal_tensor::<f64>(&mut stream_rng(3, 0, 0), &[5, 8], 1.0);
        let probe = normal_tensor::<f64>(&mut stream_rng(3, 1, 0), &[5, 8], 1.0);
        let names = p.names().to_vec();
        let mut inputs = vec![x, unit_embedding(3)?];
        inputs.extend(p.values().iter().cloned());
        check(
            "mod_norm",
            &inputs,
            |v| {
                let mut q = ParamStore::new();
                for (n, t) in names.iter().zip(&v[2..]) {
                    q.insert(n.clone(), t.clone())?;
                }
                Ok(mod_norm(&v[0], &v[1], &q, "m")?.dot(&probe)?)
            },
            &CheckOptions::default(),
        )
    }));
    out.push(Case::new(Scope::Mapper, "cross_attention", || {
        let (d, heads) = (8, 2);
        let x = normal_tensor::<f64>(&mut stream_rng(4, 0, 0), &[5, d], 1.0);
        let wq = normal_tensor::<f64>(&mut stream_rng(4, 1, 0), &[d, d], 0.5);
        let wk = normal_tensor::<f64>(&mut stream_rng(4, 2, 0), &[EMBED_DIM, d], 0.5);
        let wv = normal_tensor::<f64>(&mut stream_rng(4, 3, 0), &[EMBED_DIM, d], 0.5);
        let wo = normal_tensor::<f64>(&mut stream_rng(4, 4, 0), &[d, d], 0.5);
        let probe = normal_tensor::<f64>(&mut stream_rng(4, 5, 0), &[5, d], 1.0);
        check(
            "cross_attention",
            &[x, unit_embedding(4)?, wq, wk, wv, wo],
            |v| {
                let (y, weights) = cross_attention(&v[0], &v[1], &v[2], &v[3], &v[4], &v[5], heads)?;
                let mut s = y.dot(&probe)?;
                for w in &weights {
                    s = s.add(&w.square()?.sum()?)?;
                }
                Ok(s)
            },
            &CheckOptions::default(),
        )
    }));
    for kind in [MapperKind::Attention, MapperKind::Baseline] {
        out.push(Case::new(Scope::Mapper, format!("mapper/{}", kind.name()), move || {
            let cfg = small_mapper(kind);
            let p = randomized(&init_params(&cfg, 7)?, 7);
            let codes = normal_tensor(&mut stream_rng(7, 5, 0), &[cfg.layout.n_layers(), cfg.latent_dim], 1.0);
            let e = unit_embedding(7)?;
            let name = format!("mapper/{}", kind.name());
            // parameters and the latent rows together
            let mut inputs = p.values().to_vec();
            inputs.push(codes);
            check(
                &name,
                &inputs,
                |vals| {
                    let mut q = p.clone();
                    q.set_values(vals[..vals.len() - 1].to_vec())?;
                    let w = LatentStack::new(vals[vals.len() - 1].clone(), cfg.layout.clone())?;
                    Ok(forward_groups(&w, &e, &q, &cfg, &Group::ALL)?.delta.square()?.sum()?)
                },
                &CheckOptions::default(),
            )
        }));
    }
    out
}

fn loss_cases() -> Vec<Case> {
    const NAMES: [&str; 5] = ["clip", "directional", "background", "norm", "total"];
    NAMES
        .iter()
        .enumerate()
        .map(|(which, &name)| {
            Case::new(Scope::Losses, name, move || {
                let g = tiny_generator()?;
                let original = Original::new(&g, &latent(&g, 2)?)?;
                let lex = Lexicon::default();
                let prompt = embed_text("a human wearing red upper body clothes", &lex)?;
                let source = embed_text(SUBJECT, &lex)?;
                let target = EditTarget::new(BodyPart::Upper, EditKind::Texture);
                let (n, d) = (g.layout().n_layers(), g.latent_dim());
                let d0 = normal_tensor::<f64>(&mut stream_rng(2, 3, 0), &[n, d], 0.3);
                let weights = LossWeights::default();
                check(
                    name,
                    &[d0],
                    |x| {
                        let ctx = EditContext::new(&g, &original, &x[0], &prompt, &source, target)?;
                        match which {
                            0 => clip_loss(&ctx),
                            1 => directional_loss(&ctx),
                            2 => background_loss(&ctx),
                            3 => norm_loss(&ctx.delta),
                            _ => Ok(total_loss(&ctx, &weights)?.0),
                        }
                    },
                    &CheckOptions::with_tolerance(RENDER_TOLERANCE),
                )
            })
        })
        .collect()
}

/// All cases registered under `scope`.
pub fn registry(scope: Scope) -> Vec<Case> {
    match scope {
        Scope::Ops => op_cases(),
        Scope::Generator => generator_cases(),
        Scope::Mapper => mapper_cases(),
        Scope::Losses => loss_cases(),
    }
}

/// Runs every case of `scope` on the calling thread, in registration order.
pub fn run_scope(scope: Scope) -> Result<Vec<Row>> {
    registry(scope)
        .iter()
        .map(|c| {
            Ok(Row {
                scope,
                report: c.run()?,
            })
        })
        .collect()
}
