use super::{branch_scope, chain_prefix, Fusion, Plan, Stage, TopologySpec};
use crate::attention::{
    conv_backward, conv_decls, conv_forward, ChannelCache, GateHeadCache, SpatialCache,
};
use crate::error::{Error, Result};
use crate::params::{init_from_decls, InitScheme, ParamDecl, ParamRole, ParamStore};
use crate::tensor::{
    concat_channels, reduce, reduce_backward, sigmoid, sigmoid_grad, softmax_backward, softmax_vec,
    split_channels, Axis, Real, ReduceKind, Shape, Tensor4,
};

/// A validated topology, ready to run against a parameter store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    spec: TopologySpec,
    plan: Plan,
}

#[derive(Debug, Clone)]
enum StageCache<T> {
    Channel(ChannelCache<T>),
    Spatial(SpatialCache<T>),
}

#[derive(Debug, Clone)]
enum FusionCache<T> {
    Plain,
    Dual {
        ca: GateHeadCache<T>,
        sa: GateHeadCache<T>,
    },
    Branch {
        pooled: Tensor4<T>,
    },
    Input {
        head: GateHeadCache<T>,
        logits: Vec<T>,
    },
}

#[derive(Debug, Clone)]
pub struct TopologyCache<T> {
    prefix: Vec<StageCache<T>>,
    branches: Vec<Vec<StageCache<T>>>,
    branch_out: Vec<Tensor4<T>>,
    fusion: FusionCache<T>,
    weights: Tensor4<T>,
    suffix: Vec<StageCache<T>>,
}

impl<T> TopologyCache<T> {
    /// Branch mixing weights, shape `(N, branches, 1, 1)`. Sum fusion
    /// reports all ones and a single branch reports one.
    pub fn fusion_weights(&self) -> &Tensor4<T> {
        &self.weights
    }

    pub fn branch_outputs(&self) -> &[Tensor4<T>] {
        &self.branch_out
    }
}

fn run_chain<T: Real>(
    stages: &[Stage],
    scope: &str,
    store: &ParamStore<T>,
    prefix: &str,
    x: &Tensor4<T>,
) -> Result<(Tensor4<T>, Vec<StageCache<T>>)> {
    let mut cur = x.clone();
    let mut caches = Vec::with_capacity(stages.len());
    for (j, stage) in stages.iter().enumerate() {
        let p = format!("{prefix}{}", chain_prefix(scope, j, stage));
        cur = match stage {
            Stage::Channel(a) => {
                let (out, c) = a.forward(store, &p, &cur)?;
                caches.push(StageCache::Channel(c));
                out
            }
            Stage::Spatial(a) => {
                let (out, c) = a.forward(store, &p, &cur)?;
                caches.push(StageCache::Spatial(c));
                out
            }
        };
    }
    Ok((cur, caches))
}

fn chain_backward<T: Real>(
    stages: &[Stage],
    scope: &str,
    store: &mut ParamStore<T>,
    prefix: &str,
    caches: &[StageCache<T>],
    grad: Tensor4<T>,
) -> Result<Tensor4<T>> {
    let mut g = grad;
    for (j, (stage, cache)) in stages.iter().zip(caches).enumerate().rev() {
        let p = format!("{prefix}{}", chain_prefix(scope, j, stage));
        g = match (stage, cache) {
            (Stage::Channel(a), StageCache::Channel(c)) => a.backward(store, &p, c, &g)?,
            (Stage::Spatial(a), StageCache::Spatial(c)) => a.backward(store, &p, c, &g)?,
            _ => unreachable!("cache built by run_chain for the same stages"),
        };
    }
    Ok(g)
}

/// `out[n] = Σ_i w[n, i] · b_i[n]`.
fn weighted_sum<T: Real>(branches: &[Tensor4<T>], w: &Tensor4<T>) -> Tensor4<T> {
    let s = branches[0].shape();
    let per = s.c * s.plane();
    let nb = branches.len();
    let mut out = Tensor4::zeros(s);
    let od = out.data_mut();
    for (i, b) in branches.iter().enumerate() {
        for n in 0..s.n {
            let wi = w.data()[n * nb + i];
            for (o, &v) in od[n * per..][..per]
                .iter_mut()
                .zip(&b.data()[n * per..][..per])
            {
                *o = *o + wi * v;
            }
        }
    }
    out
}

fn per_sample_softmax<T: Real>(
    n: usize,
    k: usize,
    logits: impl Fn(usize, usize) -> T,
) -> Result<Tensor4<T>> {
    let mut data = Vec::with_capacity(n * k);
    for s in 0..n {
        let row: Vec<T> = (0..k).map(|i| logits(s, i)).collect();
        data.extend(softmax_vec(&row)?);
    }
    Tensor4::from_vec(Shape::new(n, k, 1, 1), data)
}

impl Topology {
    pub fn new(spec: TopologySpec) -> Result<Self> {
        let plan = spec.plan()?;
        Ok(Topology { spec, plan })
    }

    pub fn spec(&self) -> &TopologySpec {
        &self.spec
    }

    pub(crate) fn plan(&self) -> &Plan {
        &self.plan
    }

    pub fn branch_count(&self) -> usize {
        self.plan.branches.len()
    }

    /// Declarations of every parameter, each name starting with `prefix`.
    pub fn decls(&self, prefix: &str) -> Vec<ParamDecl> {
        let mut out = Vec::new();
        let mut chain = |scope: &str, stages: &[Stage]| {
            for (j, st) in stages.iter().enumerate() {
                out.extend(st.decls(&format!("{prefix}{}", chain_prefix(scope, j, st))));
            }
        };
        chain("pre", &self.plan.prefix);
        for (i, b) in self.plan.branches.iter().enumerate() {
            chain(&branch_scope(i), b);
        }
        chain("post", &self.plan.suffix);
        let c = self.spec.channels;
        match &self.plan.fusion {
            Fusion::Single | Fusion::Sum => {}
            Fusion::Sigmoid => out.push(ParamDecl::new(
                format!("{prefix}fuse.logit"),
                Shape::new(1, 1, 1, 1),
                ParamRole::Logit,
            )),
            Fusion::Softmax => out.push(ParamDecl::new(
                format!("{prefix}fuse.logits"),
                Shape::new(1, self.branch_count(), 1, 1),
                ParamRole::Logit,
            )),
            Fusion::DualGate {
                ca_head, sa_head, ..
            } => {
                out.extend(ca_head.decls(&format!("{prefix}fuse.gate_ca.")));
                out.extend(sa_head.decls(&format!("{prefix}fuse.gate_sa.")));
            }
            Fusion::BranchGate { .. } => {
                out.extend(conv_decls(&format!("{prefix}fuse.gate"), 3, 3 * c, 1));
            }
            Fusion::InputGate(head) => out.extend(head.decls(&format!("{prefix}fuse.gate."))),
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.decls("").iter().map(ParamDecl::numel).sum()
    }

    pub fn init<T: Real>(&self, scheme: InitScheme, seed: u64) -> Result<ParamStore<T>> {
        init_from_decls(&self.decls(""), scheme, seed)
    }

    /// Verifies that `store` holds every parameter with the declared shape.
    pub fn check_store<T: Real>(&self, store: &ParamStore<T>, prefix: &str) -> Result<()> {
        for d in self.decls(prefix) {
            let v = store.value(&d.name).map_err(|_| {
                Error::config(format!(
                    "{} is missing parameter `{}`",
                    self.spec.id, d.name
                ))
            })?;
            if v.shape() != d.shape {
                return Err(Error::config(format!(
                    "parameter `{}` has shape {}, {} expects {}",
                    d.name,
                    v.shape(),
                    self.spec.id,
                    d.shape
                )));
            }
        }
        Ok(())
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        prefix: &str,
        x: &Tensor4<T>,
    ) -> Result<(Tensor4<T>, TopologyCache<T>)> {
        let xs = x.shape();
        if xs.c != self.spec.channels {
            return Err(Error::shape(format!(
                "{} built for {} channels got input {xs}",
                self.spec.id, self.spec.channels
            )));
        }
        let (u, pre) = run_chain(&self.plan.prefix, "pre", store, prefix, x)?;
        let mut branch_out = Vec::with_capacity(self.branch_count());
        let mut branches = Vec::with_capacity(self.branch_count());
        for (i, b) in self.plan.branches.iter().enumerate() {
            let (o, c) = run_chain(b, &branch_scope(i), store, prefix, &u)?;
            branch_out.push(o);
            branches.push(c);
        }

        let (n, nb) = (xs.n, self.branch_count());
        let wshape = Shape::new(n, nb, 1, 1);
        let (weights, fusion) = match &self.plan.fusion {
            Fusion::Single | Fusion::Sum => (Tensor4::full(wshape, T::one()), FusionCache::Plain),
            Fusion::Sigmoid => {
                let z = store.value(&format!("{prefix}fuse.logit"))?.data()[0];
                let w = Tensor4::from_fn(wshape, |_, i, _, _| sigmoid(if i == 0 { z } else { -z }));
                (w, FusionCache::Plain)
            }
            Fusion::Softmax => {
                let p = softmax_vec(store.value(&format!("{prefix}fuse.logits"))?.data())?;
                (
                    Tensor4::from_fn(wshape, |_, i, _, _| p[i]),
                    FusionCache::Plain,
                )
            }
            Fusion::DualGate {
                ca_head,
                sa_head,
                sa_source,
            } => {
                let (l1, ca) =
                    ca_head.forward(store, &format!("{prefix}fuse.gate_ca."), &branch_out[0])?;
                let (l2, sa) = sa_head.forward(
                    store,
                    &format!("{prefix}fuse.gate_sa."),
                    &branch_out[*sa_source],
                )?;
                let w = per_sample_softmax(n, 2, |s, i| if i == 0 { l1[s] } else { l2[s] })?;
                (w, FusionCache::Dual { ca, sa })
            }
            Fusion::BranchGate { order } => {
                let gaps = order
                    .iter()
                    .map(|&i| reduce(&branch_out[i], ReduceKind::Mean, Axis::Spatial))
                    .collect::<Result<Vec<_>>>()?;
                let pooled = concat_channels(&gaps.iter().collect::<Vec<_>>())?;
                let logits = conv_forward(store, &format!("{prefix}fuse.gate"), &pooled)?;
                let w = per_sample_softmax(n, 3, |s, i| logits.at(s, i, 0, 0))?;
                (w, FusionCache::Branch { pooled })
            }
            Fusion::InputGate(head) => {
                let (l, head_cache) = head.forward(store, &format!("{prefix}fuse.gate."), &u)?;
                let w = Tensor4::from_fn(wshape, |s, i, _, _| {
                    sigmoid(if i == 0 { l[s] } else { -l[s] })
                });
                (
                    w,
                    FusionCache::Input {
                        head: head_cache,
                        logits: l,
                    },
                )
            }
        };

        let fused = weighted_sum(&branch_out, &weights);
        let (out, suffix) = run_chain(&self.plan.suffix, "post", store, prefix, &fused)?;
        Ok((
            out,
            TopologyCache {
                prefix: pre,
                branches,
                branch_out,
                fusion,
                weights,
                suffix,
            },
        ))
    }

    /// Accumulates parameter gradients into `store` and returns `dL/dx`.
    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        prefix: &str,
        cache: &TopologyCache<T>,
        grad_out: &Tensor4<T>,
    ) -> Result<Tensor4<T>> {
        let g_fused = chain_backward(
            &self.plan.suffix,
            "post",
            store,
            prefix,
            &cache.suffix,
            grad_out.clone(),
        )?;
        let s = g_fused.shape();
        let (n, nb, per) = (s.n, self.branch_count(), s.c * s.plane());
        let w = cache.weights.data();

        // dL/dw[n, i] and dL/db_i.
        let mut gw = vec![T::zero(); n * nb];
        let mut gb: Vec<Tensor4<T>> = Vec::with_capacity(nb);
        for (i, b) in cache.branch_out.iter().enumerate() {
            let mut g = Tensor4::zeros(s);
            for k in 0..n {
                let gf = &g_fused.data()[k * per..][..per];
                let bv = &b.data()[k * per..][..per];
                gw[k * nb + i] = gf.iter().zip(bv).map(|(&a, &c)| a * c).sum();
                let wi = w[k * nb + i];
                for (o, &v) in g.data_mut()[k * per..][..per].iter_mut().zip(gf) {
                    *o = wi * v;
                }
            }
            gb.push(g);
        }

        let mut gu = Tensor4::zeros(s);
        match (&self.plan.fusion, &cache.fusion) {
            (Fusion::Single | Fusion::Sum, _) => {}
            (Fusion::Sigmoid, _) => {
                let z = store.value(&format!("{prefix}fuse.logit"))?.data()[0];
                let dz: T = (0..n).map(|k| gw[k * 2] - gw[k * 2 + 1]).sum::<T>() * sigmoid_grad(z);
                store.accumulate_grad_slice(&format!("{prefix}fuse.logit"), &[dz])?;
            }
            (Fusion::Softmax, _) => {
                let mut dz = vec![T::zero(); nb];
                for k in 0..n {
                    let d = softmax_backward(&w[k * nb..][..nb], &gw[k * nb..][..nb]);
                    for (a, b) in dz.iter_mut().zip(d) {
                        *a = *a + b;
                    }
                }
                store.accumulate_grad_slice(&format!("{prefix}fuse.logits"), &dz)?;
            }
            (
                Fusion::DualGate {
                    ca_head,
                    sa_head,
                    sa_source,
                },
                FusionCache::Dual { ca, sa },
            ) => {
                let mut d1 = Vec::with_capacity(n);
                let mut d2 = Vec::with_capacity(n);
                for k in 0..n {
                    let d = softmax_backward(&w[k * 2..][..2], &gw[k * 2..][..2]);
                    d1.push(d[0]);
                    d2.push(d[1]);
                }
                let g0 = ca_head.backward(store, &format!("{prefix}fuse.gate_ca."), ca, &d1)?;
                gb[0].add_assign(&g0)?;
                let g1 = sa_head.backward(store, &format!("{prefix}fuse.gate_sa."), sa, &d2)?;
                gb[*sa_source].add_assign(&g1)?;
            }
            (Fusion::BranchGate { order }, FusionCache::Branch { pooled }) => {
                let mut dlog = Vec::with_capacity(n * 3);
                for k in 0..n {
                    dlog.extend(softmax_backward(&w[k * 3..][..3], &gw[k * 3..][..3]));
                }
                let dlog = Tensor4::from_vec(Shape::new(n, 3, 1, 1), dlog)?;
                let gp = conv_backward(store, &format!("{prefix}fuse.gate"), pooled, &dlog)?;
                let parts = split_channels(&gp, &[s.c; 3])?;
                for (part, &i) in parts.iter().zip(order) {
                    let g = reduce_backward(
                        &cache.branch_out[i],
                        ReduceKind::Mean,
                        Axis::Spatial,
                        part,
                    )?;
                    gb[i].add_assign(&g)?;
                }
            }
            (Fusion::InputGate(head), FusionCache::Input { head: hc, logits }) => {
                let dl: Vec<T> = (0..n)
                    .map(|k| (gw[k * 2] - gw[k * 2 + 1]) * sigmoid_grad(logits[k]))
                    .collect();
                gu.add_assign(&head.backward(store, &format!("{prefix}fuse.gate."), hc, &dl)?)?;
            }
            _ => unreachable!("fusion cache built by forward for the same plan"),
        }

        for (i, (stages, g)) in self.plan.branches.iter().zip(gb).enumerate() {
            let g = chain_backward(
                stages,
                &branch_scope(i),
                store,
                prefix,
                &cache.branches[i],
                g,
            )?;
            gu.add_assign(&g)?;
        }
        chain_backward(&self.plan.prefix, "pre", store, prefix, &cache.prefix, gu)
    }
}
