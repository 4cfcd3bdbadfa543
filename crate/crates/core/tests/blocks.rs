mod common;

use common::{max_abs_diff, rng, uniform};
use focusalpha::nn::{
    AttentionModule, CombineMode, GroupAttentionBlock, GroupAttentionConfig, Init, PairMode,
    ParamKind, ParamStore, Session, SqueezeExcite, VariantBlock, VariantConfig, VariantKind,
};
use focusalpha::{Mode, Tensor};
use proptest::prelude::*;

fn identity_1x1(c: usize) -> Tensor {
    let mut t = Tensor::zeros(&[c, c, 1, 1]);
    for i in 0..c {
        t.data_mut()[i * c + i] = 1.0;
    }
    t
}

/// Zeroes every conv and dense weight outside the entry conv.
fn zero_body(store: &mut ParamStore, block: &str) {
    let entry = format!("{block}.entry.");
    for (name, p) in store.iter_mut() {
        if p.kind == ParamKind::Weight && name.ends_with(".weight") && !name.starts_with(&entry) {
            p.value.fill(0.0);
        }
    }
}

fn variant_cfg(kind: VariantKind, cin: usize, width: usize) -> VariantConfig {
    VariantConfig {
        kind,
        in_channels: cin,
        width,
        body_kernel: 3,
        attention_kernel: 1,
        cardinality: 4,
        leaky_slope: 0.3,
        se_reduction: 8,
    }
}

fn run_variant(block: &VariantBlock, store: &ParamStore, x: &Tensor, mode: Mode) -> Tensor {
    let mut s = Session::new(store, mode);
    let xv = s.input(x.clone());
    let y = block.forward(&mut s, xv).unwrap();
    s.graph_ref().value(y).clone()
}

const KINDS: [VariantKind; 5] = [
    VariantKind::Basic,
    VariantKind::IdentityPreact,
    VariantKind::ResNeXt,
    VariantKind::ResNeXtSe,
    VariantKind::ResA,
];

#[test]
fn se_zero_weights_halve_the_input() {
    let mut store = ParamStore::new();
    let se = SqueezeExcite::register(&mut store, &mut Init::new(0), "se", 16, 8).unwrap();
    assert_eq!(se.latent, 2);
    for (_, p) in store.iter_mut() {
        p.value.fill(0.0);
    }
    let x = uniform(&[2, 16, 4, 4], -1.0, 1.0, &mut rng(1));
    let mut s = Session::new(&store, Mode::Eval);
    let xv = s.input(x.clone());
    let y = se.forward(&mut s, xv).unwrap();
    let half: Vec<f64> = x.data().iter().map(|v| 0.5 * v).collect();
    assert_eq!(s.graph_ref().value(y).data(), &half[..]);
}

#[test]
fn se_hand_computed_two_one_two() {
    let mut store = ParamStore::new();
    let se = SqueezeExcite::register(&mut store, &mut Init::new(0), "se", 2, 2).unwrap();
    store
        .set(
            "se.reduce.weight",
            Tensor::new(&[2, 1], vec![1.0, -1.0]).unwrap(),
        )
        .unwrap();
    store
        .set(
            "se.expand.weight",
            Tensor::new(&[1, 2], vec![2.0, -3.0]).unwrap(),
        )
        .unwrap();
    // Channel means 3 and 1: latent relu(3 - 1) = 2, gates sigmoid(4), sigmoid(-6).
    let x = Tensor::new(&[1, 2, 1, 2], vec![2.0, 4.0, 0.0, 2.0]).unwrap();
    let mut s = Session::new(&store, Mode::Eval);
    let xv = s.input(x);
    let y = se.forward(&mut s, xv).unwrap();
    let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
    let want = [2.0 * sig(4.0), 4.0 * sig(4.0), 0.0, 2.0 * sig(-6.0)];
    assert!(max_abs_diff(s.graph_ref().value(y).data(), &want) < 1e-15);
}

#[test]
fn se_rejects_indivisible_reduction() {
    let mut store = ParamStore::new();
    assert!(SqueezeExcite::register(&mut store, &mut Init::new(0), "se", 12, 8).is_err());
    assert!(SqueezeExcite::register(&mut store, &mut Init::new(0), "se", 12, 0).is_err());
}

#[test]
fn attention_zero_gate_gives_uniform_half_map() {
    let mut store = ParamStore::new();
    let m = AttentionModule::register(&mut store, &mut Init::new(3), "a", 8, 3, 1, 4).unwrap();
    for name in ["a.pixel.gate.weight", "a.pixel.gate.bias"] {
        store.get_mut(name).unwrap().fill(0.0);
    }
    let f = uniform(&[1, 8, 6, 6], -1.0, 1.0, &mut rng(2));
    let mut s = Session::new(&store, Mode::Train);
    let fv = s.input(f);
    let t = m.trace(&mut s, fv).unwrap();
    let g = s.graph_ref();
    assert!(g.value(t.f1).data().iter().all(|&v| v == 0.5));
    assert_eq!(g.shape(t.out), &[1, 8, 6, 6]);
}

#[test]
fn variants_with_zero_body_reduce_to_their_skip() {
    let mut r = rng(4);
    let e = uniform(&[2, 16, 8, 8], -1.0, 1.0, &mut r);
    let e_pos = e.map(f64::abs);
    for kind in KINDS {
        for mode in [Mode::Train, Mode::Eval] {
            let mut store = ParamStore::new();
            let block = VariantBlock::register(
                &mut store,
                &mut Init::new(5),
                "b",
                &variant_cfg(kind, 16, 16),
            )
            .unwrap();
            zero_body(&mut store, "b");
            store.set("b.entry.weight", identity_1x1(16)).unwrap();
            let (x, want) = match kind {
                // relu(e + 0) is the identity only on non-negative input.
                VariantKind::Basic => (e_pos.clone(), e_pos.clone()),
                // Zero gate conv: e + sigmoid(0) * e.
                VariantKind::ResA => (e.clone(), e.map(|v| 1.5 * v)),
                _ => (e.clone(), e.clone()),
            };
            let y = run_variant(&block, &store, &x, mode);
            let err = max_abs_diff(y.data(), want.data());
            assert!(err < 1e-12, "{kind:?} {mode:?}: {err}");
        }
    }
}

#[test]
fn variant_output_shapes_and_names() {
    let x = uniform(&[1, 16, 8, 8], -1.0, 1.0, &mut rng(6));
    for kind in KINDS {
        let mut store = ParamStore::new();
        let block = VariantBlock::register(
            &mut store,
            &mut Init::new(7),
            "v",
            &variant_cfg(kind, 16, 32),
        )
        .unwrap();
        let y = run_variant(&block, &store, &x, Mode::Train);
        assert_eq!(y.shape(), &[1, 32, 8, 8], "{kind:?}");
        assert!(y.all_finite());
        let names: Vec<&str> = store.names().collect();
        assert!(names.contains(&"v.entry.weight"));
        let marker = match kind {
            VariantKind::Basic => "v.bn2.gamma",
            VariantKind::IdentityPreact => "v.conv2.weight",
            VariantKind::ResNeXt => "v.branch3.conv3.weight",
            VariantKind::ResNeXtSe => "v.se.expand.weight",
            VariantKind::ResA => "v.gate.bias",
        };
        assert!(names.contains(&marker), "{kind:?} lacks {marker}");
    }
}

#[test]
fn resnext_needs_divisible_cardinality() {
    let mut cfg = variant_cfg(VariantKind::ResNeXt, 16, 12);
    cfg.cardinality = 5;
    assert!(VariantBlock::register(&mut ParamStore::new(), &mut Init::new(0), "r", &cfg).is_err());
}

fn group_cfg(
    cin: usize,
    width: usize,
    combine: CombineMode,
    pair_mode: PairMode,
) -> GroupAttentionConfig {
    GroupAttentionConfig {
        in_channels: cin,
        width,
        body_kernel: 3,
        attention_kernel: 1,
        leaky_slope: 0.3,
        se_reduction: 4,
        combine,
        pair_mode,
    }
}

#[test]
fn group_attention_rejects_width_not_divisible_by_four() {
    let cfg = group_cfg(
        8,
        10,
        CombineMode::PermutationEquivariant1x1,
        PairMode::Hadamard,
    );
    assert!(
        GroupAttentionBlock::register(&mut ParamStore::new(), &mut Init::new(0), "g", &cfg)
            .is_err()
    );
}

#[test]
fn group_attention_maps_lie_in_unit_interval() {
    let mut store = ParamStore::new();
    let cfg = group_cfg(
        8,
        16,
        CombineMode::PermutationEquivariant1x1,
        PairMode::Hadamard,
    );
    let block = GroupAttentionBlock::register(&mut store, &mut Init::new(8), "g", &cfg).unwrap();
    let x = uniform(&[2, 8, 8, 8], -2.0, 2.0, &mut rng(9));
    let mut s = Session::new(&store, Mode::Train);
    let xv = s.input(x);
    let t = block.trace(&mut s, xv).unwrap();
    let g = s.graph_ref();
    assert_eq!(t.attention_maps.len(), 2);
    for &m in &t.attention_maps {
        assert_eq!(g.shape(m), &[2, 4, 8, 8]);
        assert!(g.value(m).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
    assert_eq!(g.shape(t.out), &[2, 16, 8, 8]);
}

#[test]
fn group_attention_eval_is_deterministic() {
    let mut store = ParamStore::new();
    let cfg = group_cfg(
        4,
        8,
        CombineMode::ChannelShuffle,
        PairMode::ConcatHorizontal,
    );
    let block = GroupAttentionBlock::register(&mut store, &mut Init::new(10), "g", &cfg).unwrap();
    let x = uniform(&[1, 4, 6, 6], -1.0, 1.0, &mut rng(11));
    let run = || {
        let mut s = Session::new(&store, Mode::Eval);
        let xv = s.input(x.clone());
        let y = block.forward(&mut s, xv).unwrap();
        s.graph_ref().value(y).clone()
    };
    let (a, b) = (run(), run());
    assert!(a
        .data()
        .iter()
        .zip(b.data())
        .all(|(p, q)| p.to_bits() == q.to_bits()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn variant_output_matches_entry_shape(
        kind_idx in 0usize..5,
        n in 1usize..3,
        cin in 1usize..6,
        width_q in 1usize..4,
        h in 1usize..6,
        w in 1usize..6,
        seed in any::<u64>(),
    ) {
        let kind = KINDS[kind_idx];
        let width = 8 * width_q;
        let mut store = ParamStore::new();
        let block = VariantBlock::register(
            &mut store,
            &mut Init::new(seed),
            "p",
            &variant_cfg(kind, cin, width),
        ).unwrap();
        let x = uniform(&[n, cin, h, w], -1.0, 1.0, &mut rng(seed));
        let y = run_variant(&block, &store, &x, Mode::Train);
        prop_assert_eq!(y.shape(), &[n, width, h, w]);
        prop_assert!(y.all_finite());
    }

    #[test]
    fn se_gates_lie_in_unit_interval(c_q in 1usize..5, seed in any::<u64>()) {
        let c = 4 * c_q;
        let mut store = ParamStore::new();
        let se = SqueezeExcite::register(&mut store, &mut Init::new(seed), "se", c, 4).unwrap();
        let x = uniform(&[2, c, 3, 3], -3.0, 3.0, &mut rng(seed));
        let mut s = Session::new(&store, Mode::Train);
        let xv = s.input(x);
        let f = se.gates(&mut s, xv).unwrap();
        let g = s.graph_ref();
        prop_assert_eq!(g.shape(f), &[2, c]);
        prop_assert!(g.value(f).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
