use super::{check_ratio, conv_backward, conv_decls, conv_forward};
use crate::error::{Error, Result};
use crate::params::{ParamDecl, ParamStore};
use crate::tensor::{
    broadcast_binary, broadcast_binary_backward, pointwise, pointwise_backward, reduce,
    reduce_backward, Activation, Axis, BinaryOp, Real, ReduceKind, Tensor4,
};

/// `sigmoid(MLP(GAP(x)) + MLP(GMP(x))) ⊙ x` with one MLP
/// (1×1 conv C→C/r, ReLU, 1×1 conv C/r→C) shared by both pooled vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelAttention {
    channels: usize,
    ratio: usize,
}

#[derive(Debug, Clone)]
pub struct ChannelCache<T> {
    x: Tensor4<T>,
    pooled: [Tensor4<T>; 2],
    hidden_pre: [Tensor4<T>; 2],
    hidden: [Tensor4<T>; 2],
    logit: Tensor4<T>,
    weight: Tensor4<T>,
}

impl<T> ChannelCache<T> {
    /// Per-channel attention weights, shape `(N, C, 1, 1)`.
    pub fn weight(&self) -> &Tensor4<T> {
        &self.weight
    }
}

const POOLS: [ReduceKind; 2] = [ReduceKind::Mean, ReduceKind::Max];

impl ChannelAttention {
    pub fn new(channels: usize, ratio: usize) -> Result<Self> {
        check_ratio(channels, ratio)?;
        Ok(ChannelAttention { channels, ratio })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn ratio(&self) -> usize {
        self.ratio
    }

    pub fn hidden(&self) -> usize {
        self.channels / self.ratio
    }

    pub fn decls(&self, prefix: &str) -> Vec<ParamDecl> {
        let mut d = conv_decls(
            &format!("{prefix}mlp_down"),
            self.hidden(),
            self.channels,
            1,
        )
        .to_vec();
        d.extend(conv_decls(
            &format!("{prefix}mlp_up"),
            self.channels,
            self.hidden(),
            1,
        ));
        d
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        prefix: &str,
        x: &Tensor4<T>,
    ) -> Result<(Tensor4<T>, ChannelCache<T>)> {
        if x.shape().c != self.channels {
            return Err(Error::shape(format!(
                "channel attention built for {} channels got input {}",
                self.channels,
                x.shape()
            )));
        }
        let (down, up) = (format!("{prefix}mlp_down"), format!("{prefix}mlp_up"));
        let mut pooled = Vec::with_capacity(2);
        let mut hidden_pre = Vec::with_capacity(2);
        let mut hidden = Vec::with_capacity(2);
        let mut logit: Option<Tensor4<T>> = None;
        for kind in POOLS {
            let p = reduce(x, kind, Axis::Spatial)?;
            let h = conv_forward(store, &down, &p)?;
            let r = pointwise(&h, Activation::Relu);
            let o = conv_forward(store, &up, &r)?;
            logit = Some(match logit {
                None => o,
                Some(acc) => acc.add(&o)?,
            });
            pooled.push(p);
            hidden_pre.push(h);
            hidden.push(r);
        }
        let logit = logit.expect("two pools");
        let weight = pointwise(&logit, Activation::Sigmoid);
        let out = broadcast_binary(x, &weight, BinaryOp::Mul)?;
        let arr = |v: Vec<Tensor4<T>>| -> [Tensor4<T>; 2] { v.try_into().expect("two pools") };
        Ok((
            out,
            ChannelCache {
                x: x.clone(),
                pooled: arr(pooled),
                hidden_pre: arr(hidden_pre),
                hidden: arr(hidden),
                logit,
                weight,
            },
        ))
    }

    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        prefix: &str,
        cache: &ChannelCache<T>,
        grad_out: &Tensor4<T>,
    ) -> Result<Tensor4<T>> {
        let (down, up) = (format!("{prefix}mlp_down"), format!("{prefix}mlp_up"));
        let (mut gx, gw) =
            broadcast_binary_backward(&cache.x, &cache.weight, BinaryOp::Mul, grad_out)?;
        let glogit = pointwise_backward(&cache.logit, &cache.weight, Activation::Sigmoid, &gw)?;
        for (i, kind) in POOLS.into_iter().enumerate() {
            let gr = conv_backward(store, &up, &cache.hidden[i], &glogit)?;
            let gh = pointwise_backward(
                &cache.hidden_pre[i],
                &cache.hidden[i],
                Activation::Relu,
                &gr,
            )?;
            let gp = conv_backward(store, &down, &cache.pooled[i], &gh)?;
            gx.add_assign(&reduce_backward(&cache.x, kind, Axis::Spatial, &gp)?)?;
        }
        Ok(gx)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::params::{init_from_decls, InitScheme};
    use crate::tensor::Shape;

    /// Straight-line evaluation of the channel weights for sample `n`.
    fn reference_weights(x: &Tensor4<f64>, s: &ParamStore<f64>, n: usize) -> Vec<f64> {
        let sh = x.shape();
        let wd = s.value("mlp_down.weight").unwrap().data();
        let bd = s.value("mlp_down.bias").unwrap().data();
        let wu = s.value("mlp_up.weight").unwrap().data();
        let bu = s.value("mlp_up.bias").unwrap().data();
        let hid = bd.len();
        let mlp = |v: &[f64]| -> Vec<f64> {
            let h: Vec<f64> = (0..hid)
                .map(|j| (bd[j] + (0..sh.c).map(|c| wd[j * sh.c + c] * v[c]).sum::<f64>()).max(0.0))
                .collect();
            (0..sh.c)
                .map(|c| bu[c] + (0..hid).map(|j| wu[c * hid + j] * h[j]).sum::<f64>())
                .collect()
        };
        let avg: Vec<f64> = (0..sh.c)
            .map(|c| x.plane(n, c).iter().sum::<f64>() / sh.plane() as f64)
            .collect();
        let max: Vec<f64> = (0..sh.c)
            .map(|c| {
                x.plane(n, c)
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let (a, m) = (mlp(&avg), mlp(&max));
        (0..sh.c)
            .map(|c| 1.0 / (1.0 + (-(a[c] + m[c])).exp()))
            .collect()
    }

    fn setup(c: usize, r: usize, seed: u64) -> (ChannelAttention, ParamStore<f64>, Tensor4<f64>) {
        let ca = ChannelAttention::new(c, r).unwrap();
        let s = init_from_decls(&ca.decls(""), InitScheme::Kaiming, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let x = Tensor4::randn(Shape::new(2, c, 5, 4), 1.0, &mut rng);
        (ca, s, x)
    }

    #[test]
    fn zero_init_halves_input() {
        let ca = ChannelAttention::new(8, 2).unwrap();
        let s: ParamStore<f32> = init_from_decls(&ca.decls(""), InitScheme::Zeros, 0).unwrap();
        let x = Tensor4::from_fn(Shape::new(2, 8, 3, 3), |n, c, h, w| {
            (n + c * h) as f32 - w as f32
        });
        let (out, cache) = ca.forward(&s, "", &x).unwrap();
        assert!(cache.weight().data().iter().all(|&w| w == 0.5));
        assert_eq!(out, x.scale(0.5));
    }

    #[test]
    fn matches_reference_with_hidden_width_one() {
        let (ca, s, x) = setup(8, 8, 3);
        let (out, cache) = ca.forward(&s, "", &x).unwrap();
        for n in 0..2 {
            let w = reference_weights(&x, &s, n);
            for c in 0..8 {
                assert!((cache.weight().at(n, c, 0, 0) - w[c]).abs() < 1e-12);
                assert!(cache.weight().at(n, c, 0, 0) > 0.0 && cache.weight().at(n, c, 0, 0) < 1.0);
                for (o, xi) in out.plane(n, c).iter().zip(x.plane(n, c)) {
                    assert!((o - w[c] * xi).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn weights_depend_on_input() {
        let (ca, s, x) = setup(8, 2, 4);
        let (_, base) = ca.forward(&s, "", &x).unwrap();
        // Channel 0 of sample 0 occupies the first 20 entries.
        let mut y = x.clone();
        for v in y.data_mut()[..20].iter_mut() {
            *v *= 10.0;
        }
        let (_, scaled) = ca.forward(&s, "", &y).unwrap();
        assert_ne!(base.weight().at(0, 0, 0, 0), scaled.weight().at(0, 0, 0, 0));
    }

    #[test]
    fn wrong_channel_count_is_shape_error() {
        let (ca, s, _) = setup(8, 2, 0);
        let x = Tensor4::zeros(Shape::new(1, 4, 2, 2));
        assert!(matches!(ca.forward(&s, "", &x), Err(Error::Shape(_))));
    }
}
