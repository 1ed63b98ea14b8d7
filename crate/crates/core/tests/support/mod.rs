#![allow(dead_code)]

pub mod reference;

use attnlab_core::params::{InitScheme, ParamStore};
use attnlab_core::tensor::{Shape, Tensor4};
use attnlab_core::topology::{topology_init, TopologyId, TopologySpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use reference::Map;

/// Kaiming parameters with every bias and fusion logit moved off zero, so
/// gates and fusion weights are not at their symmetric starting point.
pub fn seeded_params(spec: &TopologySpec, seed: u64) -> ParamStore<f32> {
    let mut store: ParamStore<f32> = topology_init(spec, InitScheme::Kaiming, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for name in store.names() {
        if name.ends_with("weight") {
            continue;
        }
        let v = store.value_mut(&name).unwrap();
        let noise = Tensor4::<f32>::randn(v.shape(), 0.5, &mut rng);
        for (a, b) in v.data_mut().iter_mut().zip(noise.data()) {
            *a += b;
        }
    }
    store
}

pub fn seeded_input(shape: Shape, seed: u64) -> Tensor4<f32> {
    Tensor4::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn to_map(t: &Tensor4<f32>) -> Map {
    let [n, c, h, w] = t.shape().dims();
    Map {
        n,
        c,
        h,
        w,
        data: t.data().iter().map(|&v| v as f64).collect(),
    }
}

pub fn max_abs_diff(a: &Tensor4<f32>, b: &Map) -> f64 {
    assert_eq!(a.shape().dims(), [b.n, b.c, b.h, b.w]);
    a.data()
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x as f64 - y).abs())
        .fold(0.0, f64::max)
}

/// Library forward against the scalar reference on seed-`seed` inputs and
/// parameters.
pub fn oracle_gap(id: TopologyId, shape: Shape, seed: u64) -> f64 {
    let spec = TopologySpec::new(id, shape.c);
    let params = seeded_params(&spec, seed);
    let x = seeded_input(shape, seed);
    let out = attnlab_core::topology::topology_forward(&spec, &params, &x).unwrap();
    max_abs_diff(&out, &reference::forward(id, &params, &to_map(&x)))
}
