use proptest::prelude::*;
use sfl_core::reparam::{
    manual_gradients, merge_store, placement, BlockType, MultiplierInit, MultiplierSpec,
    PlacementMode, ReparamLayer,
};
use sfl_core::{Error, Graph, ParamKind, ParamStore, Rng, Tensor};

fn layer_with(
    w: Tensor<f64>,
    spec: MultiplierSpec,
    log_scale: bool,
) -> (ParamStore<f64>, ReparamLayer) {
    let mut st = ParamStore::new();
    let l = ReparamLayer::create(&mut st, "l", "test", w, spec, log_scale, MultiplierInit::default(), true)
        .unwrap();
    (st, l)
}

fn set(st: &mut ParamStore<f64>, id: Option<usize>, v: &[f64]) {
    st.get_mut(id.unwrap()).value = Tensor::vector(v.to_vec());
}

#[test]
fn effective_weight_examples() {
    let (st, l) = layer_with(Tensor::eye(2), MultiplierSpec::SCALAR, false);
    assert_eq!(l.merged_weight(&st).unwrap(), Tensor::eye(2));

    let (mut st, l) = layer_with(Tensor::eye(2), MultiplierSpec::ROW_COL, false);
    set(&mut st, l.row, &[2.0, 3.0]);
    set(&mut st, l.col, &[1.0, 1.0]);
    assert_eq!(
        l.merged_weight(&st).unwrap(),
        Tensor::from_rows(&[&[2.0, 0.0], &[0.0, 3.0]])
    );

    let (st, l) = layer_with(Tensor::eye(2), MultiplierSpec::SCALAR, true);
    assert_eq!(st.value(l.scalar.unwrap()).data(), &[0.0]);
    assert_eq!(l.merged_weight(&st).unwrap(), Tensor::eye(2));
}

#[test]
fn log_scale_clamps_before_exp() {
    let (mut st, l) = layer_with(Tensor::eye(1), MultiplierSpec::SCALAR, true);
    set(&mut st, l.scalar, &[1000.0]);
    let w = l.merged_weight(&st).unwrap();
    assert_eq!(w.data()[0], 20f64.exp());
    let grads = l.manual_gradients(&st, &Tensor::ones([1, 1])).unwrap();
    assert_eq!(grads.scalar.unwrap().data(), &[0.0]);
}

#[test]
fn length_mismatch_is_a_dimension_error() {
    let (mut st, l) = layer_with(Tensor::eye(2), MultiplierSpec::ROW, false);
    set(&mut st, l.row, &[1.0, 2.0, 3.0]);
    assert!(matches!(l.merged_weight(&st), Err(Error::Dimension { .. })));
    let mut g = Graph::new();
    let vars = st.bind(&mut g);
    assert!(matches!(l.effective_weight(&mut g, &vars, &st), Err(Error::Dimension { .. })));
    let w = Tensor::<f64>::eye(2);
    assert!(matches!(
        manual_gradients(&w, None, None, None, &Tensor::ones([2, 3])),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn manual_gradient_hand_values() {
    // W = I₂, r = (2, 3), c = (1, 1), Ḡ = ones:
    //   gW_ij = r_i c_j       -> [[2, 2], [3, 3]]
    //   gr_i  = Σ_j W_ij c_j  -> (1, 1)
    //   gc_j  = Σ_i r_i W_ij  -> (2, 3)
    let w = Tensor::<f64>::eye(2);
    let g = manual_gradients(&w, None, Some(&[2.0, 3.0]), Some(&[1.0, 1.0]), &Tensor::ones([2, 2]))
        .unwrap();
    assert_eq!(g.w, Tensor::from_rows(&[&[2.0, 2.0], &[3.0, 3.0]]));
    assert_eq!(g.row.unwrap().data(), &[1.0, 1.0]);
    assert_eq!(g.col.unwrap().data(), &[2.0, 3.0]);
    assert!(g.scalar.is_none());

    // Scalar only: gs = Σ W_ij Ḡ_ij = trace(I₂) = 2.
    let g = manual_gradients(&w, Some(1.0), None, None, &Tensor::ones([2, 2])).unwrap();
    assert_eq!(g.scalar.unwrap().data(), &[2.0]);
    assert_eq!(g.w, Tensor::ones([2, 2]));
}

fn rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.max_abs_diff(b) / a.max_abs().max(b.max_abs()).max(1e-300)
}

#[test]
fn manual_matches_autodiff_on_random_layers() {
    let mut rng = Rng::new(2024);
    for case in 0..100 {
        let (m, n) = (1 + rng.below(6), 1 + rng.below(6));
        let spec = MultiplierSpec {
            scalar: rng.below(2) == 1,
            row: rng.below(2) == 1,
            col: rng.below(2) == 1,
        };
        let log_scale = case % 3 == 0;
        let (mut st, l) = layer_with(Tensor::randn([m, n], 1.0, &mut rng), spec, log_scale);
        for id in [l.scalar, l.row, l.col].into_iter().flatten() {
            let len = st.value(id).len();
            st.get_mut(id).value = Tensor::randn([len], 0.7, &mut rng);
        }
        let gbar = Tensor::randn([m, n], 1.0, &mut rng);

        let mut g = Graph::new();
        let vars = st.bind(&mut g);
        let eff = l.effective_weight(&mut g, &vars, &st).unwrap();
        let r = g.constant(gbar.clone());
        let prod = g.mul(eff, r).unwrap();
        let loss = g.sum(prod).unwrap();
        let grads = g.backward(loss).unwrap();

        let manual = l.manual_gradients(&st, &gbar).unwrap();
        assert!(rel_err(&manual.w, &grads.get(vars[l.w]).unwrap()) < 1e-10);
        for (id, got) in [(l.scalar, manual.scalar), (l.row, manual.row), (l.col, manual.col)] {
            if let Some(id) = id {
                let auto = grads.get(vars[id]).unwrap();
                assert!(rel_err(&got.unwrap(), &auto) < 1e-10, "case {case}");
            }
        }
    }
}

#[test]
fn merging_folds_and_drops_multipliers() {
    let mut rng = Rng::new(7);
    let w = Tensor::randn([3, 4], 1.0, &mut rng);
    let (st, _) = layer_with(w.clone(), MultiplierSpec::NONE, false);
    let merged = merge_store(&st).unwrap();
    let got = merged.by_name("l.w").unwrap().value.data();
    assert!(got.iter().zip(w.data()).all(|(a, b)| a.to_bits() == b.to_bits()));

    let spec = MultiplierSpec {
        scalar: true,
        row: true,
        col: true,
    };
    let (mut st, l) = layer_with(w, spec, false);
    set(&mut st, l.scalar, &[1.3]);
    set(&mut st, l.row, &[0.5, 2.0, -1.0]);
    set(&mut st, l.col, &[1.1, 0.9, 3.0, 0.2]);
    st.add("other.weight", Tensor::ones([2]), ParamKind::Vector, "other", true).unwrap();
    let merged = merge_store(&st).unwrap();
    assert_eq!(merged.multiplier_count(), 0);
    assert_eq!(merged.len(), 2);
    let x = Tensor::randn([4, 1], 1.0, &mut rng);
    let forward = |wm: &Tensor<f64>| {
        let mut g = Graph::new();
        let a = g.constant(wm.clone());
        let b = g.constant(x.clone());
        let y = g.matmul(a, b).unwrap();
        g.value(y).clone()
    };
    let pre = forward(&l.merged_weight(&st).unwrap());
    let post = forward(&merged.by_name("l.w").unwrap().value);
    assert!(pre.max_abs_diff(&post) < 1e-12);
}

#[test]
fn symmetry_aware_placement_lists() {
    let m = |s: bool, r: bool, c: bool| MultiplierSpec {
        scalar: s,
        row: r,
        col: c,
    };
    let mode = PlacementMode::VectorSymmetryAware;
    let attn = placement(BlockType::Attention, mode, false);
    assert_eq!(attn["q"], m(false, true, false));
    assert_eq!(attn["k"], MultiplierSpec::NONE);
    assert_eq!(attn["v"], MultiplierSpec::NONE);
    assert_eq!(attn["out"], m(false, true, true));

    let mlp = placement(BlockType::GatedMlp, mode, false);
    assert_eq!(mlp["down"], m(false, true, true));
    assert_eq!(mlp["up"], MultiplierSpec::NONE);
    assert_eq!(mlp["gate"], m(false, true, false));

    let ssm = placement(BlockType::Ssm, mode, false);
    assert_eq!(ssm["out"], m(false, true, true));
    for r in ["x", "b", "c"] {
        assert_eq!(ssm[r], MultiplierSpec::NONE);
    }
    assert_eq!(ssm["z"], m(false, true, false));
    assert_eq!(ssm["dt"], m(false, true, false));
    assert_eq!(placement(BlockType::Ssm, mode, true)["out"], m(false, true, false));

    assert_eq!(placement(BlockType::Embedding, mode, false)["embed"], m(false, true, true));
    assert_eq!(placement(BlockType::Projector, mode, false)["projector"], MultiplierSpec::NONE);

    let none = placement(BlockType::GatedMlp, PlacementMode::None, false);
    assert!(none.values().all(|s| s.is_empty()));
    let scalars = placement(BlockType::Ssm, PlacementMode::ScalarAll, false);
    assert!(scalars.values().all(|s| *s == MultiplierSpec::SCALAR));
    assert_eq!(scalars.len(), 6);

    assert!(matches!("conv".parse::<BlockType>(), Err(Error::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// A scalar multiplier is a vector multiplier with constant entries.
    #[test]
    fn vector_full_covers_scalar_all(seed in any::<u64>(), s in 0.05f64..20.0, m in 1usize..6, n in 1usize..6) {
        let mut rng = Rng::new(seed);
        let w = Tensor::randn([m, n], 1.0, &mut rng);
        let (mut st_s, ls) = layer_with(w.clone(), MultiplierSpec::SCALAR, false);
        set(&mut st_s, ls.scalar, &[s]);
        let (mut st_v, lv) = layer_with(w, MultiplierSpec::ROW_COL, false);
        set(&mut st_v, lv.row, &vec![s; m]);
        let a = ls.merged_weight(&st_s).unwrap();
        let b = lv.merged_weight(&st_v).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn absent_factors_are_exactly_one(seed in any::<u64>(), m in 1usize..6, n in 1usize..6) {
        let mut rng = Rng::new(seed);
        let w = Tensor::randn([m, n], 1.0, &mut rng);
        let (st, l) = layer_with(w.clone(), MultiplierSpec::NONE, false);
        prop_assert_eq!(l.merged_weight(&st).unwrap(), w);
    }
}
