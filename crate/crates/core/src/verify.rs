//! Finite-difference oracle suite over every primitive and composite block.
//!
//! Each case builds a seeded random instance, reduces its output to a scalar
//! with a fixed random weighting, and compares tape gradients of every input
//! and parameter against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{grad_check, ConvSpec, GradCheckOptions, GradCheckReport, Graph, Mode, Var};
use crate::error::Result;
use crate::loss::{self, LossConfig, LossWrapper};
use crate::model::{BlockKind, DecoderMode, Model, ModelConfig};
use crate::nn::group_attention::{
    CombineMode, GroupAttentionBlock, GroupAttentionConfig, PairMode,
};
use crate::nn::variants::{VariantBlock, VariantConfig, VariantKind};
use crate::nn::{AttentionModule, Init, ParamKind, ParamStore, Session, SqueezeExcite};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize)]
pub struct CaseResult {
    pub name: &'static str,
    pub instances: usize,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub tol: f64,
    pub instances: usize,
    pub max_rel_err: f64,
    pub passed: bool,
    pub cases: Vec<CaseResult>,
}

type CaseFn = fn(u64, &GradCheckOptions) -> Result<GradCheckReport>;

/// Every case in the suite, primitives first.
pub fn cases() -> Vec<(&'static str, CaseFn)> {
    vec![
        ("conv2d", case_conv),
        ("conv2d_grouped", case_conv_grouped),
        ("conv2d_1x1", case_conv_1x1),
        ("max_pool2", |s, o| {
            prim(s, o, &[&[2, 3, 6, 6]], |g, v| g.max_pool2(v[0]))
        }),
        ("upsample2", |s, o| {
            prim(s, o, &[&[2, 3, 3, 4]], |g, v| g.upsample_repeat2(v[0]))
        }),
        ("relu", |s, o| {
            prim(s, o, &[&[2, 3, 4, 4]], |g, v| Ok(g.relu(v[0])))
        }),
        ("leaky_relu", |s, o| {
            prim(s, o, &[&[2, 3, 4, 4]], |g, v| Ok(g.leaky_relu(v[0], 0.3)))
        }),
        ("sigmoid", |s, o| {
            prim(s, o, &[&[2, 3, 4, 4]], |g, v| Ok(g.sigmoid(v[0])))
        }),
        ("batch_norm_train", case_bn_train),
        ("batch_norm_eval", case_bn_eval),
        ("global_avg_pool", |s, o| {
            prim(s, o, &[&[2, 5, 3, 3]], |g, v| g.global_avg_pool(v[0]))
        }),
        ("dropout", case_dropout),
        ("add", |s, o| {
            prim(s, o, &[&[2, 3, 4, 4], &[2, 3, 4, 4]], |g, v| {
                g.add(v[0], v[1])
            })
        }),
        ("mul", |s, o| {
            prim(s, o, &[&[2, 3, 4, 4], &[2, 3, 4, 4]], |g, v| {
                g.mul(v[0], v[1])
            })
        }),
        ("concat", |s, o| {
            prim(s, o, &[&[2, 2, 3, 3], &[2, 3, 3, 3]], |g, v| {
                g.concat_channels(&[v[0], v[1]])
            })
        }),
        ("narrow", |s, o| {
            prim(s, o, &[&[2, 6, 3, 3]], |g, v| g.narrow_channels(v[0], 2, 3))
        }),
        ("permute_channels", |s, o| {
            prim(s, o, &[&[2, 4, 3, 3]], |g, v| {
                g.permute_channels(v[0], &[2, 0, 3, 1])
            })
        }),
        ("matmul", |s, o| {
            prim(s, o, &[&[3, 4], &[4, 5]], |g, v| g.matmul(v[0], v[1]))
        }),
        ("scale_channels", |s, o| {
            prim(s, o, &[&[2, 4, 3, 3], &[2, 4]], |g, v| {
                g.scale_channels(v[0], v[1])
            })
        }),
        ("loss_all_hl", |s, o| case_loss(s, o, LossWrapper::All)),
        ("loss_hl", |s, o| case_loss(s, o, LossWrapper::None)),
        ("squeeze_excite", case_se),
        ("attention_module", case_attention),
        ("group_attention", |s, o| {
            case_group(
                s,
                o,
                CombineMode::PermutationEquivariant1x1,
                PairMode::Hadamard,
            )
        }),
        ("group_attention_shuffle", |s, o| {
            case_group(s, o, CombineMode::ChannelShuffle, PairMode::Hadamard)
        }),
        ("group_attention_concat", |s, o| {
            case_group(
                s,
                o,
                CombineMode::PermutationEquivariant1x1,
                PairMode::ConcatHorizontal,
            )
        }),
        ("block_basic", |s, o| case_variant(s, o, VariantKind::Basic)),
        ("block_identity_preact", |s, o| {
            case_variant(s, o, VariantKind::IdentityPreact)
        }),
        ("block_resnext", |s, o| {
            case_variant(s, o, VariantKind::ResNeXt)
        }),
        ("block_resnext_se", |s, o| {
            case_variant(s, o, VariantKind::ResNeXtSe)
        }),
        ("block_res_a", |s, o| case_variant(s, o, VariantKind::ResA)),
        ("model_multiscale", |s, o| {
            case_model(s, o, DecoderMode::Multiscale)
        }),
        ("model_plain", |s, o| case_model(s, o, DecoderMode::Plain)),
    ]
}

/// Runs every case `instances_per_case` times with distinct seeds.
pub fn run_suite(
    opts: &GradCheckOptions,
    seed: u64,
    instances_per_case: usize,
) -> Result<SuiteReport> {
    let mut out = Vec::new();
    let mut total = GradCheckReport::default();
    let mut instances = 0;
    for (ci, (name, f)) in cases().into_iter().enumerate() {
        let mut case = GradCheckReport::default();
        for k in 0..instances_per_case {
            let s = seed
                .wrapping_mul(1_000_003)
                .wrapping_add((ci * 1000 + k) as u64);
            let r = f(
                s,
                &GradCheckOptions {
                    seed: s,
                    ..opts.clone()
                },
            )?;
            case.merge(&r);
            instances += 1;
        }
        total.merge(&case);
        out.push(CaseResult {
            name,
            instances: instances_per_case,
            checked: case.checked,
            skipped_kinks: case.skipped_kinks,
            max_rel_err: case.max_rel_err,
            passed: case.passed,
        });
    }
    Ok(SuiteReport {
        tol: opts.tol,
        instances,
        max_rel_err: total.max_rel_err,
        passed: total.passed,
        cases: out,
    })
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Fixed random weighting that turns any output into a scalar.
fn reduce(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = Tensor::uniform(&shape, -1.0, 1.0, &mut rng(seed ^ 0x5EED_0F_F00D));
    g.weighted_sum(y, w)
}

fn prim<F>(
    seed: u64,
    opts: &GradCheckOptions,
    shapes: &[&[usize]],
    body: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut r = rng(seed);
    let leaves: Vec<Tensor> = shapes
        .iter()
        .map(|s| Tensor::uniform(s, -1.0, 1.0, &mut r))
        .collect();
    grad_check(&leaves, opts, |ls| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ls.iter().map(|t| g.leaf(t.clone())).collect();
        let y = body(&mut g, &vars)?;
        let root = reduce(&mut g, y, seed)?;
        Ok((g, root, vars))
    })
}

fn conv_case(
    seed: u64,
    opts: &GradCheckOptions,
    spec: ConvSpec,
    hw: (usize, usize),
) -> Result<GradCheckReport> {
    let mut shapes: Vec<Vec<usize>> = vec![
        vec![2, spec.in_channels, hw.0, hw.1],
        spec.weight_shape().to_vec(),
    ];
    if spec.has_bias {
        shapes.push(vec![spec.out_channels]);
    }
    let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    prim(seed, opts, &refs, |g, v| {
        g.conv2d(v[0], v[1], v.get(2).copied(), spec)
    })
}

fn case_conv(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let k = [3, 5][(seed % 2) as usize];
    conv_case(seed, opts, ConvSpec::new(2, 3, k).with_bias(true), (5, 6))
}

fn case_conv_grouped(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let groups = [2, 4][(seed % 2) as usize];
    conv_case(
        seed,
        opts,
        ConvSpec::new(4, 8, 3).with_groups(groups),
        (4, 4),
    )
}

fn case_conv_1x1(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    conv_case(seed, opts, ConvSpec::new(3, 4, 1).with_bias(true), (3, 5))
}

fn case_bn_train(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    prim(seed, opts, &[&[3, 2, 3, 3], &[2], &[2]], |g, v| {
        Ok(g.batch_norm_train(v[0], v[1], v[2])?.0)
    })
}

fn case_bn_eval(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut r = rng(seed ^ 1);
    let mean: Vec<f64> = (0..2).map(|_| r.gen_range(-0.5..0.5)).collect();
    let var: Vec<f64> = (0..2).map(|_| r.gen_range(0.5..2.0)).collect();
    prim(seed, opts, &[&[2, 2, 3, 3], &[2], &[2]], |g, v| {
        g.batch_norm_eval(v[0], v[1], v[2], &mean, &var)
    })
}

fn case_dropout(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    prim(seed, opts, &[&[2, 3, 4, 4]], |g, v| {
        g.dropout(v[0], 0.5, Mode::Train, seed)
    })
}

/// The composite loss through a sigmoid so predictions stay inside (0, 1).
fn case_loss(seed: u64, opts: &GradCheckOptions, wrapper: LossWrapper) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let shape = [2, 1, 4, 4];
    let target = Tensor::new(
        &shape,
        (0..32).map(|_| f64::from(r.gen_bool(0.4) as u8)).collect(),
    )?;
    let cfg = LossConfig {
        wrapper,
        ..LossConfig::default()
    };
    // Logits spread wide enough that the hybrid loss stays clear of the
    // wrapper's branch point, where the derivative jumps.
    let logits = Tensor::uniform(&shape, -3.0, 3.0, &mut r);
    grad_check(&[logits], opts, |ls| {
        let mut g = Graph::new();
        let x = g.leaf(ls[0].clone());
        let p = g.sigmoid(x);
        let (root, _) = loss::loss_node(&mut g, p, &target, &cfg)?;
        Ok((g, root, vec![x]))
    })
}

/// Checks input and every learnable parameter of a session-built module.
fn module_case<F>(
    seed: u64,
    opts: &GradCheckOptions,
    mut store: ParamStore,
    x_shape: &[usize],
    forward: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Session, Var) -> Result<Var>,
{
    let mut r = rng(seed ^ 2);
    // Move every parameter off its structured initial value (zero biases,
    // unit scales) so the check sees a generic point.
    let names: Vec<String> = store
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Weight)
        .map(|(n, _)| n.to_string())
        .collect();
    for n in &names {
        let t = store.get(n).expect("listed from the store");
        let jitter = Tensor::uniform(t.shape(), -0.3, 0.3, &mut r);
        let mut v = t.clone();
        v.add_assign(&jitter);
        store.set(n, v)?;
    }
    let mut leaves = vec![Tensor::uniform(x_shape, -1.0, 1.0, &mut r)];
    leaves.extend(names.iter().map(|n| store.get(n).expect("listed").clone()));
    grad_check(&leaves, opts, |ls| {
        let mut st = store.clone();
        for (n, t) in names.iter().zip(&ls[1..]) {
            st.set(n, t.clone())?;
        }
        let mut s = Session::new(&st, Mode::Train).with_seed(seed);
        let x = s.graph().leaf(ls[0].clone());
        let y = forward(&mut s, x)?;
        let root = reduce(s.graph(), y, seed)?;
        let mut vars = vec![x];
        for n in &names {
            vars.push(s.param(n)?);
        }
        Ok((s.finish().graph, root, vars))
    })
}

fn case_se(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let se = SqueezeExcite::register(&mut store, &mut Init::new(seed), "se", 8, 4)?;
    module_case(seed, opts, store, &[2, 8, 3, 3], |s, x| se.forward(s, x))
}

fn case_attention(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let m = AttentionModule::register(&mut store, &mut Init::new(seed), "att", 4, 3, 1, 8)?;
    module_case(seed, opts, store, &[2, 4, 4, 4], |s, x| m.forward(s, x))
}

fn case_group(
    seed: u64,
    opts: &GradCheckOptions,
    combine: CombineMode,
    pair_mode: PairMode,
) -> Result<GradCheckReport> {
    let cfg = GroupAttentionConfig {
        in_channels: 3,
        width: 8,
        body_kernel: 3,
        attention_kernel: 1,
        leaky_slope: 0.3,
        se_reduction: 8,
        combine,
        pair_mode,
    };
    let mut store = ParamStore::new();
    let b = GroupAttentionBlock::register(&mut store, &mut Init::new(seed), "blk", &cfg)?;
    let opts = GradCheckOptions {
        max_elems_per_leaf: Some(6),
        ..opts.clone()
    };
    module_case(seed, &opts, store, &[2, 3, 4, 4], |s, x| b.forward(s, x))
}

fn case_variant(seed: u64, opts: &GradCheckOptions, kind: VariantKind) -> Result<GradCheckReport> {
    let cfg = VariantConfig {
        kind,
        in_channels: 3,
        width: 8,
        body_kernel: 3,
        attention_kernel: 1,
        cardinality: 2,
        leaky_slope: 0.3,
        se_reduction: 4,
    };
    let mut store = ParamStore::new();
    let b = VariantBlock::register(&mut store, &mut Init::new(seed), "blk", &cfg)?;
    let opts = GradCheckOptions {
        max_elems_per_leaf: Some(6),
        ..opts.clone()
    };
    module_case(seed, &opts, store, &[2, 3, 4, 4], |s, x| b.forward(s, x))
}

fn case_model(seed: u64, opts: &GradCheckOptions, decoder: DecoderMode) -> Result<GradCheckReport> {
    let cfg = ModelConfig {
        scales: 2,
        widths: vec![4, 8],
        decoder_mode: decoder,
        block_kind: BlockKind::GroupAttention,
        head_width: 4,
        bottleneck_dropout: 0.5,
        ..ModelConfig::alpha_tiny()
    };
    let model = Model::build(&cfg, seed)?;
    let opts = GradCheckOptions {
        max_elems_per_leaf: Some(2),
        ..opts.clone()
    };
    let m = model.clone();
    module_case(seed, &opts, model.params, &[2, 3, 4, 4], move |s, x| {
        Ok(m.forward(s, x)?.prediction)
    })
}
