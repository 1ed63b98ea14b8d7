mod support;

use attnlab_core::attention::{ChannelAttention, SpatialAttention};
use attnlab_core::params::{InitScheme, ParamStore};
use attnlab_core::tensor::{Shape, Tensor4};
use attnlab_core::topology::{
    topology_forward, topology_init, Category, Topology, TopologyId, TopologySpec,
};
use proptest::prelude::*;

use support::{oracle_gap, seeded_input, seeded_params};

const SHAPE: Shape = Shape {
    n: 2,
    c: 16,
    h: 8,
    w: 8,
};

fn zero_forward(id: TopologyId, x: &Tensor4<f32>) -> Tensor4<f32> {
    let spec = TopologySpec::new(id, x.shape().c);
    let p = topology_init(&spec, InitScheme::Zeros, 0).unwrap();
    topology_forward(&spec, &p, x).unwrap()
}

#[test]
fn every_topology_matches_its_scalar_reference() {
    for id in TopologyId::ALL {
        let gap = oracle_gap(id, SHAPE, 42);
        assert!(gap < 1e-5, "{id}: max abs diff {gap:e}");
    }
}

#[test]
fn reference_also_matches_on_odd_sizes() {
    let shape = Shape::new(3, 32, 5, 7);
    for id in TopologyId::ALL {
        let gap = oracle_gap(id, shape, 7);
        assert!(gap < 1e-5, "{id}: max abs diff {gap:e}");
    }
}

#[test]
fn zero_init_identities() {
    let x = seeded_input(SHAPE, 3);
    for (id, k) in [
        (TopologyId::Csa, 0.25f32),
        (TopologyId::CSa2, 1.0),
        (TopologyId::Rcsa, 1.25),
        (TopologyId::Arcsa, 0.625),
        (TopologyId::Tgpfa, 2.0 / 3.0),
    ] {
        let out = zero_forward(id, &x);
        for (&o, &v) in out.data().iter().zip(x.data()) {
            let want = k * v;
            assert!(
                (o - want).abs() <= f32::EPSILON * want.abs().max(f32::MIN_POSITIVE),
                "{id}: {o} vs {want}"
            );
        }
    }
}

#[test]
fn serial_topologies_are_manual_compositions() {
    let x = seeded_input(SHAPE, 11);
    let spec = TopologySpec::new(TopologyId::Csca, 16);
    let p = seeded_params(&spec, 11);
    let ca = ChannelAttention::new(16, 8).unwrap();
    let sa = SpatialAttention::new(7).unwrap();
    let (a, _) = ca.forward(&p, "b0.ca0.", &x).unwrap();
    let (b, _) = sa.forward(&p, "b0.sa1.", &a).unwrap();
    let (c, _) = ca.forward(&p, "b0.ca2.", &b).unwrap();
    assert_eq!(topology_forward(&spec, &p, &x).unwrap(), c);
}

/// Copies the parameters of one store into another under renamed keys.
fn renamed(src: &ParamStore<f32>, map: &[(&str, &str)], dst: &mut ParamStore<f32>) {
    for name in src.names() {
        let target = map
            .iter()
            .find_map(|(from, to)| name.strip_prefix(from).map(|rest| format!("{to}{rest}")))
            .unwrap();
        *dst.value_mut(&target).unwrap() = src.value(&name).unwrap().clone();
    }
}

#[test]
fn residual_adds_exactly_the_input() {
    let x = seeded_input(SHAPE, 5);
    let csa = TopologySpec::new(TopologyId::Csa, 16);
    let p = seeded_params(&csa, 5);
    let rcsa = TopologySpec::new(TopologyId::Rcsa, 16);
    let mut q = topology_init(&rcsa, InitScheme::Zeros, 0).unwrap();
    renamed(
        &p,
        &[("b0.ca0.", "b1.ca0."), ("b0.sa1.", "b1.sa1.")],
        &mut q,
    );
    let a = topology_forward(&csa, &p, &x).unwrap();
    let r = topology_forward(&rcsa, &q, &x).unwrap();
    for ((&r, &a), &v) in r.data().iter().zip(a.data()).zip(x.data()) {
        assert_eq!(r, v + a);
    }
}

#[test]
fn saturated_fusion_logits_select_one_branch() {
    let x = seeded_input(SHAPE, 8);

    let spec = TopologySpec::new(TopologyId::Arcsa, 16);
    let mut p = seeded_params(&spec, 8);
    p.value_mut("fuse.logit").unwrap().data_mut()[0] = -20.0;
    let out = topology_forward(&spec, &p, &x).unwrap();
    for (&o, &v) in out.data().iter().zip(x.data()) {
        assert!((o - v).abs() < 1e-6, "{o} vs {v}");
    }

    let spec = TopologySpec::new(TopologyId::CSafa, 16);
    let mut p = seeded_params(&spec, 8);
    p.value_mut("fuse.logit").unwrap().data_mut()[0] = 20.0;
    let out = topology_forward(&spec, &p, &x).unwrap();
    let (ca, _) = ChannelAttention::new(16, 8)
        .unwrap()
        .forward(&p, "b0.ca0.", &x)
        .unwrap();
    for (&o, &v) in out.data().iter().zip(ca.data()) {
        assert!((o - v).abs() < 1e-6, "{o} vs {v}");
    }
}

#[test]
fn neutral_fusion_logits() {
    let x = seeded_input(SHAPE, 2);
    for (id, want) in [
        (TopologyId::CSafa, vec![0.5, 0.5]),
        (TopologyId::BiCsafa, vec![0.5, 0.5]),
        (TopologyId::Arcsa, vec![0.5, 0.5]),
    ] {
        let t = Topology::new(TopologySpec::new(id, 16)).unwrap();
        let p: ParamStore<f32> = t.init(InitScheme::Kaiming, 1).unwrap();
        let (_, cache) = t.forward(&p, "", &x).unwrap();
        assert_eq!(&cache.fusion_weights().data()[..2], want.as_slice(), "{id}");
    }
}

#[test]
fn init_is_deterministic() {
    for id in TopologyId::ALL {
        let spec = TopologySpec::new(id, 16);
        let a: ParamStore<f32> = topology_init(&spec, InitScheme::Kaiming, 3).unwrap();
        let b: ParamStore<f32> = topology_init(&spec, InitScheme::Kaiming, 3).unwrap();
        assert_eq!(a, b, "{id}");
    }
}

#[test]
fn wrong_store_is_a_configuration_error() {
    let x = seeded_input(SHAPE, 0);
    let csa = TopologySpec::new(TopologyId::Csa, 16);
    let p = topology_init::<f32>(
        &TopologySpec::new(TopologyId::Sca, 16),
        InitScheme::Zeros,
        0,
    )
    .unwrap();
    assert!(matches!(
        topology_forward(&csa, &p, &x),
        Err(attnlab_core::Error::Config(_))
    ));
}

fn shapes() -> impl Strategy<Value = Shape> {
    (1usize..4, 1usize..3, 1usize..7, 1usize..7)
        .prop_map(|(n, c, h, w)| Shape::new(n, 16 * c, h, w))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn shape_is_preserved(shape in shapes(), seed in 0u64..1000) {
        let x = seeded_input(shape, seed);
        for id in TopologyId::ALL {
            let spec = TopologySpec::new(id, shape.c);
            let out = topology_forward(&spec, &seeded_params(&spec, seed), &x).unwrap();
            prop_assert_eq!(out.shape(), shape);
        }
    }

    #[test]
    fn fusion_weights_are_normalised(seed in 0u64..10_000, scale in 0.1f64..5.0) {
        let x = Tensor4::<f32>::randn(SHAPE, scale, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed));
        for id in TopologyId::ALL.into_iter().filter(|id| id.is_softmax_gated()) {
            let t = Topology::new(TopologySpec::new(id, 16)).unwrap();
            let p = seeded_params(t.spec(), seed);
            let (_, cache) = t.forward(&p, "", &x).unwrap();
            let w = cache.fusion_weights();
            for n in 0..SHAPE.n {
                let row: Vec<f32> = (0..t.branch_count()).map(|i| w.at(n, i, 0, 0)).collect();
                prop_assert!(row.iter().all(|&v| v > 0.0));
                let s: f64 = row.iter().map(|&v| v as f64).sum();
                prop_assert!((s - 1.0).abs() <= 1e-6, "{} sums to {}", id, s);
            }
        }
    }

    #[test]
    fn outputs_are_bounded(seed in 0u64..10_000) {
        let x = seeded_input(SHAPE, seed);
        for id in TopologyId::ALL {
            let spec = TopologySpec::new(id, 16);
            let out = topology_forward(&spec, &seeded_params(&spec, seed), &x).unwrap();
            let bound = match id.category() {
                Category::Serial => 1.0f32,
                _ if id.is_residual() => continue,
                _ => 2.0,
            };
            for (&o, &v) in out.data().iter().zip(x.data()) {
                prop_assert!(o.abs() <= bound * v.abs() * (1.0 + 1e-6), "{}: {} vs {}", id, o, v);
            }
        }
    }
}

#[test]
fn reference_tells_the_gate_inputs_apart() {
    let spec = TopologySpec::new(TopologyId::GcSa2, 16).with_literal_gate_input(true);
    let p = seeded_params(&spec, 42);
    let x = seeded_input(SHAPE, 42);
    let out = topology_forward(&spec, &p, &x).unwrap();
    let gap = support::max_abs_diff(
        &out,
        &support::reference::forward(TopologyId::GcSa2, &p, &support::to_map(&x)),
    );
    assert!(gap > 1e-4, "{gap:e}");
}
