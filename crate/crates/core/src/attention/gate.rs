use super::{check_ratio, conv_backward, conv_decls, conv_forward};
use crate::error::{Error, Result};
use crate::params::{ParamDecl, ParamStore};
use crate::tensor::{
    broadcast_binary, broadcast_binary_backward, pointwise, pointwise_backward, reduce,
    reduce_backward, sigmoid, Activation, Axis, BinaryOp, Real, ReduceKind, Shape, Tensor4,
};

/// Squeezed two-layer head producing one logit per sample:
/// `up(ReLU(down(v)))` with 1×1 convs C→C/r→1.
///
/// A pooled head applies it to `GAP(x)`. An unpooled head applies it at every
/// position and averages the resulting logit map over space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GateHead {
    channels: usize,
    ratio: usize,
    pooled: bool,
}

#[derive(Debug, Clone)]
pub struct GateHeadCache<T> {
    x: Tensor4<T>,
    input: Tensor4<T>,
    hidden_pre: Tensor4<T>,
    hidden: Tensor4<T>,
    logit_map_shape: Shape,
}

impl GateHead {
    pub fn new(channels: usize, ratio: usize, pooled: bool) -> Result<Self> {
        check_ratio(channels, ratio)?;
        Ok(GateHead {
            channels,
            ratio,
            pooled,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn ratio(&self) -> usize {
        self.ratio
    }

    pub fn pooled(&self) -> bool {
        self.pooled
    }

    pub fn decls(&self, prefix: &str) -> Vec<ParamDecl> {
        let hidden = self.channels / self.ratio;
        let mut d = conv_decls(&format!("{prefix}down"), hidden, self.channels, 1).to_vec();
        d.extend(conv_decls(&format!("{prefix}up"), 1, hidden, 1));
        d
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        prefix: &str,
        x: &Tensor4<T>,
    ) -> Result<(Vec<T>, GateHeadCache<T>)> {
        if x.shape().c != self.channels {
            return Err(Error::shape(format!(
                "gate head built for {} channels got input {}",
                self.channels,
                x.shape()
            )));
        }
        let input = if self.pooled {
            reduce(x, ReduceKind::Mean, Axis::Spatial)?
        } else {
            x.clone()
        };
        let hidden_pre = conv_forward(store, &format!("{prefix}down"), &input)?;
        let hidden = pointwise(&hidden_pre, Activation::Relu);
        let map = conv_forward(store, &format!("{prefix}up"), &hidden)?;
        let logits = reduce(&map, ReduceKind::Mean, Axis::Spatial)?.into_vec();
        Ok((
            logits,
            GateHeadCache {
                x: x.clone(),
                input,
                hidden_pre,
                hidden,
                logit_map_shape: map.shape(),
            },
        ))
    }

    /// Takes `dL/dlogit` per sample and returns `dL/dx`.
    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        prefix: &str,
        cache: &GateHeadCache<T>,
        grad_logits: &[T],
    ) -> Result<Tensor4<T>> {
        let n = cache.x.shape().n;
        let glog = Tensor4::from_vec(Shape::new(n, 1, 1, 1), grad_logits.to_vec())?;
        let map_probe = Tensor4::zeros(cache.logit_map_shape);
        let gmap = reduce_backward(&map_probe, ReduceKind::Mean, Axis::Spatial, &glog)?;
        let gh = conv_backward(store, &format!("{prefix}up"), &cache.hidden, &gmap)?;
        let gpre = pointwise_backward(&cache.hidden_pre, &cache.hidden, Activation::Relu, &gh)?;
        let gin = conv_backward(store, &format!("{prefix}down"), &cache.input, &gpre)?;
        if self.pooled {
            reduce_backward(&cache.x, ReduceKind::Mean, Axis::Spatial, &gin)
        } else {
            Ok(gin)
        }
    }
}

/// `sigmoid(l) ⊙ x` with `l` from a pooled [`GateHead`]: one scalar scales
/// the whole feature map of each sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GateAttention {
    pub head: GateHead,
}

#[derive(Debug, Clone)]
pub struct GateCache<T> {
    head: GateHeadCache<T>,
    gate: Tensor4<T>,
    logits: Vec<T>,
}

impl<T: Copy> GateCache<T> {
    pub fn logits(&self) -> &[T] {
        &self.logits
    }

    /// `sigmoid(logit)` per sample, shape `(N, 1, 1, 1)`.
    pub fn gate(&self) -> &Tensor4<T> {
        &self.gate
    }
}

impl GateAttention {
    pub fn new(channels: usize, ratio: usize) -> Result<Self> {
        Ok(GateAttention {
            head: GateHead::new(channels, ratio, true)?,
        })
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        prefix: &str,
        x: &Tensor4<T>,
    ) -> Result<(Tensor4<T>, GateCache<T>)> {
        let (logits, head) = self.head.forward(store, prefix, x)?;
        let gate = Tensor4::from_vec(
            Shape::new(logits.len(), 1, 1, 1),
            logits.iter().map(|&l| sigmoid(l)).collect(),
        )?;
        let out = broadcast_binary(x, &gate, BinaryOp::Mul)?;
        Ok((out, GateCache { head, gate, logits }))
    }

    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        prefix: &str,
        cache: &GateCache<T>,
        grad_out: &Tensor4<T>,
    ) -> Result<Tensor4<T>> {
        let (mut gx, gg) =
            broadcast_binary_backward(&cache.head.x, &cache.gate, BinaryOp::Mul, grad_out)?;
        let logits = Tensor4::from_vec(cache.gate.shape(), cache.logits.clone())?;
        let glog = pointwise_backward(&logits, &cache.gate, Activation::Sigmoid, &gg)?;
        gx.add_assign(
            &self
                .head
                .backward(store, prefix, &cache.head, glog.data())?,
        )?;
        Ok(gx)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::params::{init_from_decls, InitScheme};

    fn setup(pooled: bool) -> (GateHead, ParamStore<f64>, Tensor4<f64>) {
        let head = GateHead::new(8, 4, pooled).unwrap();
        let s = init_from_decls(&head.decls(""), InitScheme::Kaiming, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor4::randn(Shape::new(3, 8, 4, 4), 1.0, &mut rng);
        (head, s, x)
    }

    /// Straight-line `up(relu(down(v)))` for one C-vector.
    fn head_ref(s: &ParamStore<f64>, v: &[f64]) -> f64 {
        let wd = s.value("down.weight").unwrap().data();
        let bd = s.value("down.bias").unwrap().data();
        let wu = s.value("up.weight").unwrap().data();
        let bu = s.value("up.bias").unwrap().data()[0];
        let c = v.len();
        bu + (0..bd.len())
            .map(|j| wu[j] * (bd[j] + (0..c).map(|i| wd[j * c + i] * v[i]).sum::<f64>()).max(0.0))
            .sum::<f64>()
    }

    #[test]
    fn zero_init_halves_input() {
        let ga = GateAttention::new(8, 4).unwrap();
        let s: ParamStore<f32> = init_from_decls(&ga.head.decls(""), InitScheme::Zeros, 0).unwrap();
        let x = Tensor4::from_fn(Shape::new(2, 8, 2, 2), |n, c, h, w| (n + c + h * w) as f32);
        let (out, cache) = ga.forward(&s, "", &x).unwrap();
        assert_eq!(out, x.scale(0.5));
        assert!(cache.gate().data().iter().all(|&g| g == 0.5));
    }

    #[test]
    fn gate_is_one_scalar_per_sample_and_matches_reference() {
        let (head, s, x) = setup(true);
        let ga = GateAttention { head };
        let (out, cache) = ga.forward(&s, "", &x).unwrap();
        for n in 0..3 {
            let v: Vec<f64> = (0..8)
                .map(|c| x.plane(n, c).iter().sum::<f64>() / 16.0)
                .collect();
            let l = head_ref(&s, &v);
            assert!((cache.logits()[n] - l).abs() < 1e-12);
            let g = 1.0 / (1.0 + (-l).exp());
            for c in 0..8 {
                for (o, xi) in out.plane(n, c).iter().zip(x.plane(n, c)) {
                    assert!((o / xi - g).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn unpooled_head_averages_per_position_logits() {
        let (head, s, x) = setup(false);
        let (logits, _) = head.forward(&s, "", &x).unwrap();
        for n in 0..3 {
            let mut acc = 0.0;
            for p in 0..16 {
                let v: Vec<f64> = (0..8).map(|c| x.plane(n, c)[p]).collect();
                acc += head_ref(&s, &v);
            }
            assert!((logits[n] - acc / 16.0).abs() < 1e-12);
        }
    }
}
