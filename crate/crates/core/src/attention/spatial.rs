use super::{conv_backward, conv_decls, conv_forward};
use crate::error::{Error, Result};
use crate::params::{ParamDecl, ParamStore};
use crate::tensor::{
    broadcast_binary, broadcast_binary_backward, concat_channels, pointwise, pointwise_backward,
    reduce, reduce_backward, split_channels, Activation, Axis, BinaryOp, Real, ReduceKind, Tensor4,
};

/// `sigmoid(conv_k([mean_c(x), max_c(x)])) ⊙ x`, a single `(N, 1, H, W)` map
/// broadcast over channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpatialAttention {
    kernel: usize,
}

#[derive(Debug, Clone)]
pub struct SpatialCache<T> {
    x: Tensor4<T>,
    pooled: Tensor4<T>,
    logit: Tensor4<T>,
    weight: Tensor4<T>,
}

impl<T> SpatialCache<T> {
    /// Per-position attention weights, shape `(N, 1, H, W)`.
    pub fn weight(&self) -> &Tensor4<T> {
        &self.weight
    }
}

impl SpatialAttention {
    pub fn new(kernel: usize) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::config(format!(
                "spatial kernel must be odd, got {kernel}"
            )));
        }
        Ok(SpatialAttention { kernel })
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn decls(&self, prefix: &str) -> Vec<ParamDecl> {
        conv_decls(&format!("{prefix}conv"), 1, 2, self.kernel).to_vec()
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        prefix: &str,
        x: &Tensor4<T>,
    ) -> Result<(Tensor4<T>, SpatialCache<T>)> {
        let mean = reduce(x, ReduceKind::Mean, Axis::Channel)?;
        let max = reduce(x, ReduceKind::Max, Axis::Channel)?;
        let pooled = concat_channels(&[&mean, &max])?;
        let logit = conv_forward(store, &format!("{prefix}conv"), &pooled)?;
        let weight = pointwise(&logit, Activation::Sigmoid);
        let out = broadcast_binary(x, &weight, BinaryOp::Mul)?;
        Ok((
            out,
            SpatialCache {
                x: x.clone(),
                pooled,
                logit,
                weight,
            },
        ))
    }

    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        prefix: &str,
        cache: &SpatialCache<T>,
        grad_out: &Tensor4<T>,
    ) -> Result<Tensor4<T>> {
        let (mut gx, gw) =
            broadcast_binary_backward(&cache.x, &cache.weight, BinaryOp::Mul, grad_out)?;
        let glogit = pointwise_backward(&cache.logit, &cache.weight, Activation::Sigmoid, &gw)?;
        let gp = conv_backward(store, &format!("{prefix}conv"), &cache.pooled, &glogit)?;
        let parts = split_channels(&gp, &[1, 1])?;
        gx.add_assign(&reduce_backward(
            &cache.x,
            ReduceKind::Mean,
            Axis::Channel,
            &parts[0],
        )?)?;
        gx.add_assign(&reduce_backward(
            &cache.x,
            ReduceKind::Max,
            Axis::Channel,
            &parts[1],
        )?)?;
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

    #[test]
    fn zero_init_halves_input() {
        let sa = SpatialAttention::new(7).unwrap();
        let s: ParamStore<f32> = init_from_decls(&sa.decls(""), InitScheme::Zeros, 0).unwrap();
        let x = Tensor4::from_fn(Shape::new(2, 3, 4, 5), |n, c, h, w| {
            (n * 7 + c * 3 + h) as f32 - w as f32
        });
        let (out, cache) = sa.forward(&s, "", &x).unwrap();
        assert!(cache.weight().data().iter().all(|&w| w == 0.5));
        assert_eq!(out, x.scale(0.5));
    }

    #[test]
    fn hot_pixel_peaks_inside_its_neighbourhood() {
        let sa = SpatialAttention::new(7).unwrap();
        let mut s: ParamStore<f64> = init_from_decls(&sa.decls(""), InitScheme::Zeros, 0).unwrap();
        s.value_mut("conv.weight").unwrap().data_mut().fill(1.0);
        let mut x = Tensor4::full(Shape::new(1, 3, 16, 16), 0.1);
        for c in 0..3 {
            *x.at_mut(0, c, 4, 11) = 5.0;
        }
        let (_, cache) = sa.forward(&s, "", &x).unwrap();
        let w = cache.weight();
        let best = (0..256)
            .max_by(|&a, &b| w.data()[a].partial_cmp(&w.data()[b]).unwrap())
            .unwrap();
        let (y, xx) = (best / 16, best % 16);
        assert!(
            y.abs_diff(4) <= 3 && xx.abs_diff(11) <= 3,
            "peak at ({y},{xx})"
        );
        // Positions out of reach of the hot pixel see only background.
        assert!(w.at(0, 0, 15, 0) < w.at(0, 0, 4, 11));
    }

    #[test]
    fn kernel_size_changes_the_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor4::<f64>::randn(Shape::new(1, 4, 9, 9), 1.0, &mut rng);
        let mut maps = Vec::new();
        for k in [3, 7] {
            let sa = SpatialAttention::new(k).unwrap();
            let s: ParamStore<f64> =
                init_from_decls(&sa.decls(""), InitScheme::Kaiming, 5).unwrap();
            maps.push(sa.forward(&s, "", &x).unwrap().1.weight().clone());
        }
        assert_ne!(maps[0], maps[1]);
    }
}
