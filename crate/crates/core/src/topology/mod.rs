//! The 18 channel/spatial attention topologies.
//!
//! Every topology is lowered to one shape of graph:
//!
//! ```text
//! x -> prefix chain -> u -> branch_0 chain -+
//!                        -> branch_1 chain -+-> fusion -> suffix chain -> out
//!                        -> ...            -+
//! ```
//!
//! A chain is a list of CA/SA stages (empty means identity). Each stage owns
//! its own parameters, named `{pre|b<i>|post}.{ca|sa}<j>.…`; fusion
//! parameters live under `fuse.`.

mod graph;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use graph::{Topology, TopologyCache};

use crate::attention::{
    ChannelAttention, GateHead, SpatialAttention, DEFAULT_KERNEL, DEFAULT_RATIO,
};
use crate::error::{Error, Result};
use crate::params::{InitScheme, ParamDecl, ParamStore};
use crate::tensor::{Real, Shape, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TopologyId {
    Ca,
    Sa,
    Csa,
    Sca,
    Csca,
    Scsa,
    CSa2,
    CSafa,
    BiCsa,
    BiCsafa,
    GcSa2,
    Tgpfa,
    Rcsa,
    Arcsa,
    Grcsa,
    CMssa,
    MscSa,
    CCmssa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Serial,
    Parallel,
    Residual,
    Multiscale,
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Serial => "serial",
            Category::Parallel => "parallel",
            Category::Residual => "residual",
            Category::Multiscale => "multiscale",
        })
    }
}

impl TopologyId {
    pub const ALL: [TopologyId; 18] = [
        TopologyId::Ca,
        TopologyId::Sa,
        TopologyId::Csa,
        TopologyId::Sca,
        TopologyId::Csca,
        TopologyId::Scsa,
        TopologyId::CSa2,
        TopologyId::CSafa,
        TopologyId::BiCsa,
        TopologyId::BiCsafa,
        TopologyId::GcSa2,
        TopologyId::Tgpfa,
        TopologyId::Rcsa,
        TopologyId::Arcsa,
        TopologyId::Grcsa,
        TopologyId::CMssa,
        TopologyId::MscSa,
        TopologyId::CCmssa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TopologyId::Ca => "CA",
            TopologyId::Sa => "SA",
            TopologyId::Csa => "CSA",
            TopologyId::Sca => "SCA",
            TopologyId::Csca => "CSCA",
            TopologyId::Scsa => "SCSA",
            TopologyId::CSa2 => "C&SA2",
            TopologyId::CSafa => "C&SAFA",
            TopologyId::BiCsa => "Bi-CSA",
            TopologyId::BiCsafa => "Bi-CSAFA",
            TopologyId::GcSa2 => "GC&SA2",
            TopologyId::Tgpfa => "TGPFA",
            TopologyId::Rcsa => "RCSA",
            TopologyId::Arcsa => "ARCSA",
            TopologyId::Grcsa => "GRCSA",
            TopologyId::CMssa => "C-MSSA",
            TopologyId::MscSa => "MSC-SA",
            TopologyId::CCmssa => "C-CMSSA",
        }
    }

    pub fn category(self) -> Category {
        use TopologyId::*;
        match self {
            Ca | Sa | Csa | Sca | Csca | Scsa => Category::Serial,
            CSa2 | CSafa | BiCsa | BiCsafa | GcSa2 | Tgpfa => Category::Parallel,
            Rcsa | Arcsa | Grcsa => Category::Residual,
            CMssa | MscSa | CCmssa => Category::Multiscale,
        }
    }

    /// ASCII rendering of the composition.
    pub fn equation(self) -> &'static str {
        use TopologyId::*;
        match self {
            Ca => "CA(x)",
            Sa => "SA(x)",
            Csa => "SA(CA(x))",
            Sca => "CA(SA(x))",
            Csca => "CA(SA(CA(x)))",
            Scsa => "SA(CA(SA(x)))",
            CSa2 => "SA(x) + CA(x)",
            CSafa => "w*CA(x) + (1-w)*SA(x),  w = sigmoid(z)",
            BiCsa => "SA(CA(x)) + CA(SA(x))",
            BiCsafa => "w1*SA(CA(x)) + w2*CA(SA(x)),  [w1,w2] = softmax(z1,z2)",
            GcSa2 => "w1*CA(x) + w2*SA(x),  [w1,w2] = softmax(GateCA(CA(x)), mean_hw GateSA(SA(x))) per sample",
            Tgpfa => "w1*x + w2*CA(x) + w3*SA(x),  w = softmax(Gate(CA(x), SA(x), x)) per sample",
            Rcsa => "x + SA(CA(x))",
            Arcsa => "(1-w)*x + w*SA(CA(x)),  w = sigmoid(z)",
            Grcsa => "(1-g)*x + g*SA(CA(x)),  g = sigmoid(GA head(x)) per sample",
            CMssa => "sum_k w_k*SA_k(c),  c = CA(x), k in {3,5,7}, w = softmax(Gate(...)) per sample",
            MscSa => "SA(sum_r w_r*CA_r(x)),  r in {4,8,16}, w = softmax(Gate(...)) per sample",
            CCmssa => "SA3(SA5(SA7(CA(x))))",
        }
    }

    /// Whether the output is a convex or multiplicative combination of
    /// attenuated copies of `x`, i.e. no branch adds `x` back unweighted.
    pub fn is_residual(self) -> bool {
        self.category() == Category::Residual
    }

    /// Whether fusion weights are computed from the input at forward time.
    pub fn has_dynamic_gate(self) -> bool {
        use TopologyId::*;
        matches!(self, GcSa2 | Tgpfa | Grcsa | CMssa | MscSa)
    }

    /// Whether the fusion weights come from a softmax.
    pub fn is_softmax_gated(self) -> bool {
        use TopologyId::*;
        matches!(self, BiCsafa | GcSa2 | Tgpfa | CMssa | MscSa)
    }

    pub fn parse(s: &str) -> Result<TopologyId> {
        let key = normalize(s);
        if let Some(id) = TopologyId::ALL
            .into_iter()
            .find(|id| normalize(id.name()) == key)
        {
            return Ok(id);
        }
        let mut ranked: Vec<(usize, TopologyId)> = TopologyId::ALL
            .into_iter()
            .map(|id| (strsim::levenshtein(&key, &normalize(id.name())), id))
            .filter(|&(d, _)| d <= 2)
            .collect();
        ranked.sort();
        Err(Error::Lookup {
            name: s.to_string(),
            suggestions: ranked
                .into_iter()
                .take(3)
                .map(|(_, id)| id.name().to_string())
                .collect(),
            valid: TopologyId::ALL.map(TopologyId::name).join(", "),
        })
    }
}

/// Case, whitespace, hyphen and `&`/`and`/`²` insensitive key.
fn normalize(s: &str) -> String {
    s.to_lowercase()
        .replace('²', "2")
        .replace("^2", "2")
        .replace("and", "&")
        .chars()
        .filter(|c| !c.is_whitespace() && *c != '-' && *c != '_')
        .collect()
}

impl fmt::Display for TopologyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TopologyId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TopologyId::parse(s)
    }
}

/// A topology plus every size knob it depends on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologySpec {
    pub id: TopologyId,
    pub channels: usize,
    /// Squeeze ratio of CA stages and gate heads.
    pub ratio: usize,
    /// Kernel of SA stages, including the final SA of MSC-SA.
    pub kernel: usize,
    /// Squeeze ratios of the three MSC-SA branches.
    pub multi_ratios: [usize; 3],
    /// Kernels of the three multi-scale SA stages, small to large.
    pub multi_kernels: [usize; 3],
    /// Feed GC&SA2's spatial gate head the CA branch output, as its equation
    /// is literally written, instead of the SA branch output.
    pub literal_gate_input: bool,
}

impl TopologySpec {
    pub fn new(id: TopologyId, channels: usize) -> Self {
        TopologySpec {
            id,
            channels,
            ratio: DEFAULT_RATIO,
            kernel: DEFAULT_KERNEL,
            multi_ratios: [4, 8, 16],
            multi_kernels: [3, 5, 7],
            literal_gate_input: false,
        }
    }

    pub fn with_ratio(mut self, r: usize) -> Self {
        self.ratio = r;
        self
    }

    pub fn with_kernel(mut self, k: usize) -> Self {
        self.kernel = k;
        self
    }

    pub fn with_multi_ratios(mut self, r: [usize; 3]) -> Self {
        self.multi_ratios = r;
        self
    }

    pub fn with_multi_kernels(mut self, k: [usize; 3]) -> Self {
        self.multi_kernels = k;
        self
    }

    pub fn with_literal_gate_input(mut self, on: bool) -> Self {
        self.literal_gate_input = on;
        self
    }

    pub(crate) fn plan(&self) -> Result<Plan> {
        use TopologyId::*;
        let c = self.channels;
        let ca = || ChannelAttention::new(c, self.ratio).map(Stage::Channel);
        let sa = || SpatialAttention::new(self.kernel).map(Stage::Spatial);
        let sak = |k: usize| SpatialAttention::new(k).map(Stage::Spatial);
        let head = |pooled| GateHead::new(c, self.ratio, pooled);
        let [k_small, k_mid, k_large] = self.multi_kernels;

        let mut plan = Plan {
            prefix: vec![],
            branches: vec![],
            fusion: Fusion::Single,
            suffix: vec![],
        };
        match self.id {
            Ca => plan.branches = vec![vec![ca()?]],
            Sa => plan.branches = vec![vec![sa()?]],
            Csa => plan.branches = vec![vec![ca()?, sa()?]],
            Sca => plan.branches = vec![vec![sa()?, ca()?]],
            Csca => plan.branches = vec![vec![ca()?, sa()?, ca()?]],
            Scsa => plan.branches = vec![vec![sa()?, ca()?, sa()?]],
            CSa2 => {
                plan.branches = vec![vec![sa()?], vec![ca()?]];
                plan.fusion = Fusion::Sum;
            }
            CSafa => {
                plan.branches = vec![vec![ca()?], vec![sa()?]];
                plan.fusion = Fusion::Sigmoid;
            }
            BiCsa => {
                plan.branches = vec![vec![ca()?, sa()?], vec![sa()?, ca()?]];
                plan.fusion = Fusion::Sum;
            }
            BiCsafa => {
                plan.branches = vec![vec![ca()?, sa()?], vec![sa()?, ca()?]];
                plan.fusion = Fusion::Softmax;
            }
            GcSa2 => {
                plan.branches = vec![vec![ca()?], vec![sa()?]];
                plan.fusion = Fusion::DualGate {
                    ca_head: head(true)?,
                    sa_head: head(false)?,
                    sa_source: if self.literal_gate_input { 0 } else { 1 },
                };
            }
            Tgpfa => {
                plan.branches = vec![vec![], vec![ca()?], vec![sa()?]];
                plan.fusion = Fusion::BranchGate { order: [1, 2, 0] };
            }
            Rcsa => {
                plan.branches = vec![vec![], vec![ca()?, sa()?]];
                plan.fusion = Fusion::Sum;
            }
            Arcsa => {
                plan.branches = vec![vec![ca()?, sa()?], vec![]];
                plan.fusion = Fusion::Sigmoid;
            }
            Grcsa => {
                plan.branches = vec![vec![ca()?, sa()?], vec![]];
                plan.fusion = Fusion::InputGate(head(true)?);
            }
            CMssa => {
                plan.prefix = vec![ca()?];
                plan.branches = vec![vec![sak(k_small)?], vec![sak(k_mid)?], vec![sak(k_large)?]];
                plan.fusion = Fusion::BranchGate { order: [0, 1, 2] };
            }
            MscSa => {
                plan.branches = self
                    .multi_ratios
                    .iter()
                    .map(|&r| ChannelAttention::new(c, r).map(|a| vec![Stage::Channel(a)]))
                    .collect::<Result<_>>()?;
                plan.fusion = Fusion::BranchGate { order: [0, 1, 2] };
                plan.suffix = vec![sa()?];
            }
            CCmssa => plan.branches = vec![vec![ca()?, sak(k_large)?, sak(k_mid)?, sak(k_small)?]],
        }
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        self.plan().map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Stage {
    Channel(ChannelAttention),
    Spatial(SpatialAttention),
}

impl Stage {
    fn tag(&self) -> &'static str {
        match self {
            Stage::Channel(_) => "ca",
            Stage::Spatial(_) => "sa",
        }
    }

    fn decls(&self, prefix: &str) -> Vec<ParamDecl> {
        match self {
            Stage::Channel(a) => a.decls(prefix),
            Stage::Spatial(a) => a.decls(prefix),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Fusion {
    /// Exactly one branch, passed through.
    Single,
    /// Unweighted sum of all branches.
    Sum,
    /// `w·b0 + (1−w)·b1` with `w = sigmoid(fuse.logit)`.
    Sigmoid,
    /// `Σ w_i·b_i` with `w = softmax(fuse.logits)`.
    Softmax,
    /// Per-sample softmax over a pooled gate head on branch 0 and an
    /// unpooled gate head on branch `sa_source`.
    DualGate {
        ca_head: GateHead,
        sa_head: GateHead,
        sa_source: usize,
    },
    /// Per-sample softmax of a linear map over the concatenated GAP of the
    /// branches, visited in `order`.
    BranchGate { order: [usize; 3] },
    /// `g·b0 + (1−g)·b1` with `g = sigmoid(head(u))` per sample.
    InputGate(GateHead),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Plan {
    pub prefix: Vec<Stage>,
    pub branches: Vec<Vec<Stage>>,
    pub fusion: Fusion,
    pub suffix: Vec<Stage>,
}

pub(crate) fn chain_prefix(scope: &str, j: usize, stage: &Stage) -> String {
    format!("{scope}.{}{j}.", stage.tag())
}

pub(crate) fn branch_scope(i: usize) -> String {
    format!("b{i}")
}

/// One row of a parameter inventory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Shape,
    pub count: usize,
}

/// Every learnable tensor of the topology, in initialization order.
pub fn enumerate_params(spec: &TopologySpec) -> Result<Vec<ParamEntry>> {
    Ok(Topology::new(*spec)?
        .decls("")
        .into_iter()
        .map(|d| ParamEntry {
            count: d.numel(),
            name: d.name,
            shape: d.shape,
        })
        .collect())
}

pub fn topology_init<T: Real>(
    spec: &TopologySpec,
    scheme: InitScheme,
    seed: u64,
) -> Result<ParamStore<T>> {
    Topology::new(*spec)?.init(scheme, seed)
}

/// Forward pass on an unprefixed store; checks the store against the spec.
pub fn topology_forward<T: Real>(
    spec: &TopologySpec,
    params: &ParamStore<T>,
    x: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    let t = Topology::new(*spec)?;
    t.check_store(params, "")?;
    Ok(t.forward(params, "", x)?.0)
}
