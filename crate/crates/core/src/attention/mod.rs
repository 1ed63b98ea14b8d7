//! Base attention components. Each one reads its parameters from a
//! [`ParamStore`] under a name prefix, so a topology can hold many
//! independently parameterized instances in one store.

mod channel;
mod gate;
mod spatial;

pub use channel::{ChannelAttention, ChannelCache};
pub use gate::{GateAttention, GateCache, GateHead, GateHeadCache};
pub use spatial::{SpatialAttention, SpatialCache};

use crate::error::{Error, Result};
use crate::params::{init_from_decls, InitScheme, ParamDecl, ParamRole, ParamStore};
use crate::tensor::{conv2d, conv2d_backward, ConvKernel, Real, Shape, Tensor4};

pub const DEFAULT_RATIO: usize = 8;
pub const DEFAULT_KERNEL: usize = 7;

/// Any one of the base components, for standalone construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComponentSpec {
    Channel(ChannelAttention),
    Spatial(SpatialAttention),
    Gate(GateAttention),
}

impl ComponentSpec {
    pub fn decls(&self, prefix: &str) -> Vec<ParamDecl> {
        match self {
            ComponentSpec::Channel(c) => c.decls(prefix),
            ComponentSpec::Spatial(s) => s.decls(prefix),
            ComponentSpec::Gate(g) => g.head.decls(prefix),
        }
    }

    pub fn param_count(&self) -> usize {
        self.decls("").iter().map(ParamDecl::numel).sum()
    }
}

/// Parameters for one standalone component, names without prefix.
pub fn init_params<T: Real>(
    spec: &ComponentSpec,
    scheme: InitScheme,
    seed: u64,
) -> Result<ParamStore<T>> {
    init_from_decls(&spec.decls(""), scheme, seed)
}

pub(crate) fn check_ratio(channels: usize, ratio: usize) -> Result<()> {
    if channels == 0 {
        return Err(Error::config("attention needs at least one channel"));
    }
    if ratio == 0 || !channels.is_multiple_of(ratio) {
        return Err(Error::config(format!(
            "squeeze ratio {ratio} does not divide {channels} channels"
        )));
    }
    Ok(())
}

/// Declarations for a biased convolution `name.weight` / `name.bias`.
pub(crate) fn conv_decls(name: &str, c_out: usize, c_in: usize, k: usize) -> [ParamDecl; 2] {
    [
        ParamDecl::new(
            format!("{name}.weight"),
            Shape::new(c_out, c_in, k, k),
            ParamRole::Weight {
                fan_in: c_in * k * k,
            },
        ),
        ParamDecl::new(
            format!("{name}.bias"),
            Shape::new(1, c_out, 1, 1),
            ParamRole::Bias,
        ),
    ]
}

pub(crate) fn conv_forward<T: Real>(
    store: &ParamStore<T>,
    name: &str,
    x: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    let w = store.value(&format!("{name}.weight"))?;
    let b = store.value(&format!("{name}.bias"))?;
    conv2d(x, &ConvKernel::new(w, Some(b.data()))?)
}

/// Accumulates the weight and bias gradients and returns `dL/dx`.
pub(crate) fn conv_backward<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    x: &Tensor4<T>,
    grad_out: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    let (wn, bn) = (format!("{name}.weight"), format!("{name}.bias"));
    let grads = {
        let w = store.value(&wn)?;
        let b = store.value(&bn)?;
        conv2d_backward(x, &ConvKernel::new(w, Some(b.data()))?, grad_out)?
    };
    store.accumulate_grad(&wn, &grads.weight)?;
    store.accumulate_grad_slice(&bn, &grads.bias)?;
    Ok(grads.input)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn component_param_counts() {
        let ca = ComponentSpec::Channel(ChannelAttention::new(512, 8).unwrap());
        assert_eq!(ca.param_count(), 66_112);
        let sa = ComponentSpec::Spatial(SpatialAttention::new(7).unwrap());
        assert_eq!(sa.param_count(), 99);
        let ga = ComponentSpec::Gate(GateAttention::new(512, 8).unwrap());
        assert_eq!(ga.param_count(), 32_897);
    }

    #[test]
    fn init_is_deterministic_and_zeros_is_exact() {
        let spec = ComponentSpec::Channel(ChannelAttention::new(16, 4).unwrap());
        let a: ParamStore<f32> = init_params(&spec, InitScheme::Kaiming, 9).unwrap();
        let b: ParamStore<f32> = init_params(&spec, InitScheme::Kaiming, 9).unwrap();
        assert_eq!(a, b);
        let z: ParamStore<f32> = init_params(&spec, InitScheme::Zeros, 9).unwrap();
        assert!(z
            .iter()
            .all(|(_, p)| p.value.data().iter().all(|&v| v == 0.0)));
        assert_eq!(
            a.names(),
            [
                "mlp_down.weight",
                "mlp_down.bias",
                "mlp_up.weight",
                "mlp_up.bias"
            ]
        );
    }

    #[test]
    fn bad_ratios_rejected() {
        assert!(matches!(
            ChannelAttention::new(12, 8),
            Err(Error::Config(_))
        ));
        assert!(matches!(ChannelAttention::new(8, 0), Err(Error::Config(_))));
        assert!(matches!(GateAttention::new(6, 4), Err(Error::Config(_))));
        assert!(matches!(SpatialAttention::new(4), Err(Error::Config(_))));
    }
}
