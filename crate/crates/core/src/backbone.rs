//! MicroVGG: stages of `[conv3x3 → BN → ReLU] × k → maxpool2`, optional
//! attention after each stage (or only the last), then a linear classifier
//! on the flattened features.
//!
//! Parameter names: `s{i}.conv{j}.weight`, `s{i}.conv{j}.bias` (only without
//! batch norm), `s{i}.bn{j}.gamma`, `s{i}.bn{j}.beta`, `s{i}.attn.…`,
//! `head.weight`, `head.bias`. Running statistics live in a separate buffer
//! store as `s{i}.bn{j}.running_mean` / `running_var`.

use serde::{Deserialize, Serialize};

use crate::attention::{conv_backward, conv_decls, conv_forward};
use crate::error::{Error, Result};
use crate::params::{init_from_decls, InitScheme, ParamDecl, ParamRole, ParamStore};
use crate::tensor::{
    batch_norm_backward, batch_norm_eval, batch_norm_train, conv2d, conv2d_backward, max_pool2,
    max_pool2_backward, pointwise, pointwise_backward, Activation, BatchNormCache, ConvKernel,
    Real, Shape, Tensor4,
};
use crate::topology::{Topology, TopologyCache, TopologySpec};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Insertion {
    AfterEachStage,
    LastStageOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stage_channels: Vec<usize>,
    pub convs_per_stage: usize,
    /// `(C, H, W)` of one input image.
    pub input: (usize, usize, usize),
    pub classes: usize,
    /// Attention template; its `channels` is replaced by each insertion
    /// point's width.
    pub attention: Option<TopologySpec>,
    pub insertion: Insertion,
    pub batch_norm: bool,
}

impl BackboneConfig {
    pub fn new(input: (usize, usize, usize), classes: usize) -> Self {
        BackboneConfig {
            stage_channels: vec![32, 64, 128],
            convs_per_stage: 2,
            input,
            classes,
            attention: None,
            insertion: Insertion::AfterEachStage,
            batch_norm: true,
        }
    }

    pub fn with_stages(mut self, stages: Vec<usize>) -> Self {
        self.stage_channels = stages;
        self
    }

    pub fn with_attention(mut self, spec: Option<TopologySpec>) -> Self {
        self.attention = spec;
        self
    }

    pub fn with_insertion(mut self, insertion: Insertion) -> Self {
        self.insertion = insertion;
        self
    }

    pub fn with_batch_norm(mut self, on: bool) -> Self {
        self.batch_norm = on;
        self
    }

    /// Spatial size `(H, W)` after the last pooling.
    pub fn final_spatial(&self) -> (usize, usize) {
        let f = 1 << self.stage_channels.len();
        (self.input.1 / f, self.input.2 / f)
    }

    pub fn feature_len(&self) -> usize {
        let (h, w) = self.final_spatial();
        self.stage_channels.last().copied().unwrap_or(0) * h * w
    }
}

#[derive(Debug, Clone)]
struct ConvUnitCache<T> {
    input: Tensor4<T>,
    bn: Option<BatchNormCache<T>>,
    pre_act: Tensor4<T>,
    out: Tensor4<T>,
}

#[derive(Debug, Clone)]
struct StageCache<T> {
    convs: Vec<ConvUnitCache<T>>,
    pool_in: Shape,
    argmax: Vec<usize>,
    attn: Option<TopologyCache<T>>,
}

#[derive(Debug, Clone)]
pub struct ModelCache<T> {
    stages: Vec<StageCache<T>>,
    feature_shape: Shape,
    features: Tensor4<T>,
}

/// Architecture only; parameters and running statistics are passed in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Model {
    stages: Vec<usize>,
    convs: usize,
    input: (usize, usize, usize),
    classes: usize,
    batch_norm: bool,
    attention: Vec<Option<Topology>>,
}

impl Model {
    pub fn new(cfg: &BackboneConfig) -> Result<Self> {
        let s = cfg.stage_channels.len();
        if s == 0 || cfg.stage_channels.contains(&0) {
            return Err(Error::config(
                "backbone needs at least one stage of positive width",
            ));
        }
        if cfg.convs_per_stage == 0 {
            return Err(Error::config("each stage needs at least one convolution"));
        }
        if cfg.classes < 2 {
            return Err(Error::config("classifier needs at least 2 classes"));
        }
        let (c, h, w) = cfg.input;
        let f = 1usize << s;
        if c == 0 || h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::config(format!(
                "input {c}x{h}x{w} is not divisible by 2^{s} for {s} pooling stages"
            )));
        }
        let attention = cfg
            .stage_channels
            .iter()
            .enumerate()
            .map(|(i, &ch)| {
                let here = match cfg.insertion {
                    Insertion::AfterEachStage => true,
                    Insertion::LastStageOnly => i + 1 == s,
                };
                match cfg.attention {
                    Some(t) if here => Topology::new(TopologySpec { channels: ch, ..t }).map(Some),
                    _ => Ok(None),
                }
            })
            .collect::<Result<_>>()?;
        Ok(Model {
            stages: cfg.stage_channels.clone(),
            convs: cfg.convs_per_stage,
            input: cfg.input,
            classes: cfg.classes,
            batch_norm: cfg.batch_norm,
            attention,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn input(&self) -> (usize, usize, usize) {
        self.input
    }

    fn feature_len(&self) -> usize {
        let f = 1 << self.stages.len();
        self.stages.last().expect("validated") * (self.input.1 / f) * (self.input.2 / f)
    }

    pub fn decls(&self) -> Vec<ParamDecl> {
        let mut out = Vec::new();
        let mut c_in = self.input.0;
        for (i, &c) in self.stages.iter().enumerate() {
            for j in 0..self.convs {
                let [w, b] = conv_decls(&format!("s{i}.conv{j}"), c, c_in, 3);
                out.push(w);
                if self.batch_norm {
                    let bn = format!("s{i}.bn{j}");
                    out.push(ParamDecl::new(
                        format!("{bn}.gamma"),
                        Shape::new(1, c, 1, 1),
                        ParamRole::Scale,
                    ));
                    out.push(ParamDecl::new(
                        format!("{bn}.beta"),
                        Shape::new(1, c, 1, 1),
                        ParamRole::Bias,
                    ));
                } else {
                    out.push(b);
                }
                c_in = c;
            }
            if let Some(t) = &self.attention[i] {
                out.extend(t.decls(&format!("s{i}.attn.")));
            }
        }
        out.extend(conv_decls("head", self.classes, self.feature_len(), 1));
        out
    }

    pub fn buffer_decls(&self) -> Vec<ParamDecl> {
        let mut out = Vec::new();
        if !self.batch_norm {
            return out;
        }
        for (i, &c) in self.stages.iter().enumerate() {
            for j in 0..self.convs {
                let bn = format!("s{i}.bn{j}");
                out.push(ParamDecl::new(
                    format!("{bn}.running_mean"),
                    Shape::new(1, c, 1, 1),
                    ParamRole::Bias,
                ));
                out.push(ParamDecl::new(
                    format!("{bn}.running_var"),
                    Shape::new(1, c, 1, 1),
                    ParamRole::Scale,
                ));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.decls().iter().map(ParamDecl::numel).sum()
    }

    /// Scalars belonging to attention modules, over all insertion points.
    pub fn attention_param_count(&self) -> usize {
        self.attention
            .iter()
            .flatten()
            .map(Topology::param_count)
            .sum()
    }

    pub fn init<T: Real>(
        &self,
        scheme: InitScheme,
        seed: u64,
    ) -> Result<(ParamStore<T>, ParamStore<T>)> {
        Ok((
            init_from_decls(&self.decls(), scheme, seed)?,
            init_from_decls(&self.buffer_decls(), InitScheme::Kaiming, 0)?,
        ))
    }

    fn check_input<T: Real>(&self, x: &Tensor4<T>) -> Result<()> {
        let s = x.shape();
        if (s.c, s.h, s.w) != self.input || s.n == 0 {
            return Err(Error::shape(format!(
                "model expects (N,{},{},{}) input, got {s}",
                self.input.0, self.input.1, self.input.2
            )));
        }
        Ok(())
    }

    fn conv<T: Real>(
        &self,
        params: &ParamStore<T>,
        name: &str,
        x: &Tensor4<T>,
    ) -> Result<Tensor4<T>> {
        if self.batch_norm {
            conv2d(
                x,
                &ConvKernel::new(params.value(&format!("{name}.weight"))?, None)?,
            )
        } else {
            conv_forward(params, name, x)
        }
    }

    fn conv_back<T: Real>(
        &self,
        params: &mut ParamStore<T>,
        name: &str,
        x: &Tensor4<T>,
        g: &Tensor4<T>,
    ) -> Result<Tensor4<T>> {
        if self.batch_norm {
            let wn = format!("{name}.weight");
            let grads = conv2d_backward(x, &ConvKernel::new(params.value(&wn)?, None)?, g)?;
            params.accumulate_grad(&wn, &grads.weight)?;
            Ok(grads.input)
        } else {
            conv_backward(params, name, x, g)
        }
    }

    fn head<T: Real>(
        &self,
        params: &ParamStore<T>,
        x: &Tensor4<T>,
    ) -> Result<(Tensor4<T>, Tensor4<T>)> {
        let s = x.shape();
        let features = x.clone().reshape(Shape::new(s.n, s.c * s.h * s.w, 1, 1))?;
        let logits = conv_forward(params, "head", &features)?;
        Ok((features, logits))
    }

    /// Training-mode forward: batch statistics, caches for backward.
    /// Returns logits of shape `(N, classes, 1, 1)`.
    pub fn forward_train<T: Real>(
        &self,
        params: &ParamStore<T>,
        x: &Tensor4<T>,
    ) -> Result<(Tensor4<T>, ModelCache<T>)> {
        self.check_input(x)?;
        let mut cur = x.clone();
        let mut stages = Vec::with_capacity(self.stages.len());
        for i in 0..self.stages.len() {
            let mut convs = Vec::with_capacity(self.convs);
            for j in 0..self.convs {
                let z = self.conv(params, &format!("s{i}.conv{j}"), &cur)?;
                let (pre_act, bn) = if self.batch_norm {
                    let bn = format!("s{i}.bn{j}");
                    let (y, c) = batch_norm_train(
                        &z,
                        params.value(&format!("{bn}.gamma"))?.data(),
                        params.value(&format!("{bn}.beta"))?.data(),
                        T::of(BN_EPS),
                    )?;
                    (y, Some(c))
                } else {
                    (z, None)
                };
                let out = pointwise(&pre_act, Activation::Relu);
                convs.push(ConvUnitCache {
                    input: cur,
                    bn,
                    pre_act,
                    out: out.clone(),
                });
                cur = out;
            }
            let pool_in = cur.shape();
            let (pooled, argmax) = max_pool2(&cur)?;
            cur = pooled;
            let attn = match &self.attention[i] {
                Some(t) => {
                    let (o, c) = t.forward(params, &format!("s{i}.attn."), &cur)?;
                    cur = o;
                    Some(c)
                }
                None => None,
            };
            stages.push(StageCache {
                convs,
                pool_in,
                argmax,
                attn,
            });
        }
        let feature_shape = cur.shape();
        let (features, logits) = self.head(params, &cur)?;
        Ok((
            logits,
            ModelCache {
                stages,
                feature_shape,
                features,
            },
        ))
    }

    /// Folds the batch statistics of a training forward into the running
    /// averages (unbiased variance).
    pub fn update_running_stats<T: Real>(
        &self,
        buffers: &mut ParamStore<T>,
        cache: &ModelCache<T>,
    ) -> Result<()> {
        let m = T::of(BN_MOMENTUM);
        for (i, st) in cache.stages.iter().enumerate() {
            for (j, cu) in st.convs.iter().enumerate() {
                let Some(bn) = &cu.bn else { continue };
                let count = T::of(bn.count as f64);
                let unbias = if bn.count > 1 {
                    count / (count - T::one())
                } else {
                    T::one()
                };
                let rm = buffers.value_mut(&format!("s{i}.bn{j}.running_mean"))?;
                for (r, &v) in rm.data_mut().iter_mut().zip(&bn.mean) {
                    *r = (T::one() - m) * *r + m * v;
                }
                let rv = buffers.value_mut(&format!("s{i}.bn{j}.running_var"))?;
                for (r, &v) in rv.data_mut().iter_mut().zip(&bn.var) {
                    *r = (T::one() - m) * *r + m * v * unbias;
                }
            }
        }
        Ok(())
    }

    /// Inference forward using running statistics.
    pub fn forward_eval<T: Real>(
        &self,
        params: &ParamStore<T>,
        buffers: &ParamStore<T>,
        x: &Tensor4<T>,
    ) -> Result<Tensor4<T>> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for i in 0..self.stages.len() {
            for j in 0..self.convs {
                let mut z = self.conv(params, &format!("s{i}.conv{j}"), &cur)?;
                if self.batch_norm {
                    let bn = format!("s{i}.bn{j}");
                    z = batch_norm_eval(
                        &z,
                        params.value(&format!("{bn}.gamma"))?.data(),
                        params.value(&format!("{bn}.beta"))?.data(),
                        buffers.value(&format!("{bn}.running_mean"))?.data(),
                        buffers.value(&format!("{bn}.running_var"))?.data(),
                        T::of(BN_EPS),
                    )?;
                }
                cur = pointwise(&z, Activation::Relu);
            }
            cur = max_pool2(&cur)?.0;
            if let Some(t) = &self.attention[i] {
                cur = t.forward(params, &format!("s{i}.attn."), &cur)?.0;
            }
        }
        Ok(self.head(params, &cur)?.1)
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward<T: Real>(
        &self,
        params: &mut ParamStore<T>,
        cache: &ModelCache<T>,
        grad_logits: &Tensor4<T>,
    ) -> Result<Tensor4<T>> {
        let gf = conv_backward(params, "head", &cache.features, grad_logits)?;
        let mut g = gf.reshape(cache.feature_shape)?;
        for (i, st) in cache.stages.iter().enumerate().rev() {
            if let (Some(t), Some(c)) = (&self.attention[i], &st.attn) {
                g = t.backward(params, &format!("s{i}.attn."), c, &g)?;
            }
            g = max_pool2_backward(st.pool_in, &st.argmax, &g)?;
            for (j, cu) in st.convs.iter().enumerate().rev() {
                g = pointwise_backward(&cu.pre_act, &cu.out, Activation::Relu, &g)?;
                if let Some(bn) = &cu.bn {
                    let name = format!("s{i}.bn{j}");
                    let gamma = params.value(&format!("{name}.gamma"))?.data().to_vec();
                    let (gx, gg, gb) = batch_norm_backward(bn, &gamma, &g)?;
                    params.accumulate_grad_slice(&format!("{name}.gamma"), &gg)?;
                    params.accumulate_grad_slice(&format!("{name}.beta"), &gb)?;
                    g = gx;
                }
                g = self.conv_back(params, &format!("s{i}.conv{j}"), &cu.input, &g)?;
            }
        }
        Ok(g)
    }
}

/// Builds the architecture and its seeded parameters and running statistics.
pub fn build_model(
    cfg: &BackboneConfig,
    seed: u64,
) -> Result<(Model, ParamStore<f32>, ParamStore<f32>)> {
    let model = Model::new(cfg)?;
    let (params, buffers) = model.init(InitScheme::Kaiming, seed)?;
    Ok((model, params, buffers))
}
