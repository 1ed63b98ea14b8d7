//! Parameter and FLOP accounting for a backbone with attention inserted.
//!
//! Counts are per image (batch 1). Convolutions and linear layers cost
//! `k²·C_in·C_out·H_out·W_out` multiply-accumulates; pooling, normalization,
//! activations and elementwise arithmetic cost one FLOP per element
//! produced (reductions: per element consumed).

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::attention::{ChannelAttention, GateHead, SpatialAttention};
use crate::error::{Error, Result};
use crate::topology::{Fusion, Stage, Topology, TopologyId, TopologySpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    MicroVgg,
    Vgg16,
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "microvgg" => Ok(BackboneKind::MicroVgg),
            "vgg16" => Ok(BackboneKind::Vgg16),
            _ => Err(Error::config(format!(
                "unknown backbone `{s}`; expected microvgg or vgg16"
            ))),
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackboneKind::MicroVgg => "microvgg",
            BackboneKind::Vgg16 => "vgg16",
        })
    }
}

/// How a multiply-accumulate is priced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopConvention {
    /// One multiply plus one add.
    TwoPerMac,
    /// One per MAC, as many profilers report "FLOPs".
    MacOnly,
}

impl FlopConvention {
    fn factor(self) -> u64 {
        match self {
            FlopConvention::TwoPerMac => 2,
            FlopConvention::MacOnly => 1,
        }
    }
}

impl FromStr for FlopConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "2mac" | "two-per-mac" => Ok(FlopConvention::TwoPerMac),
            "mac" | "mac-only" => Ok(FlopConvention::MacOnly),
            _ => Err(Error::config(format!(
                "unknown FLOP convention `{s}`; expected 2mac or mac"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostConfig {
    pub backbone: BackboneKind,
    pub attention: Option<TopologyId>,
    /// `(C, H, W)` of one input image.
    pub input: (usize, usize, usize),
    pub classes: usize,
    /// Number of final stages followed by an attention module; `None`
    /// means one for vgg16 and every stage for microvgg.
    pub attention_stages: Option<usize>,
    pub convention: FlopConvention,
}

impl CostConfig {
    /// VGG16 on 64×64 RGB, 10 classes.
    pub fn vgg16(attention: Option<TopologyId>) -> Self {
        CostConfig {
            backbone: BackboneKind::Vgg16,
            attention,
            input: (3, 64, 64),
            classes: 10,
            attention_stages: None,
            convention: FlopConvention::TwoPerMac,
        }
    }

    /// Default MicroVGG on 32×32 RGB, 10 classes.
    pub fn microvgg(attention: Option<TopologyId>) -> Self {
        CostConfig {
            backbone: BackboneKind::MicroVgg,
            input: (3, 32, 32),
            ..CostConfig::vgg16(attention)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostRow {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub config: CostConfig,
    /// Architectural assumptions behind the counts, one per line.
    pub assumptions: Vec<String>,
    pub rows: Vec<CostRow>,
    pub total_params: u64,
    pub total_flops: u64,
    /// Millions of parameters, rounded half-up to 3 decimals.
    pub params_m: String,
    /// GFLOPs, rounded half-up to 3 decimals.
    pub flops_g: String,
}

/// `count / unit` rounded half-up to 3 decimals, in exact integer arithmetic.
pub fn round3(count: u64, unit: u64) -> String {
    let milli = unit / 1000;
    let q = (count + milli / 2) / milli;
    format!("{}.{:03}", q / 1000, q % 1000)
}

const VGG16_STAGES: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)];
const VGG16_HIDDEN: usize = 512;
const MICRO_STAGES: [usize; 3] = [32, 64, 128];
const MICRO_CONVS: usize = 2;

struct Counter {
    mac: u64,
    rows: Vec<CostRow>,
}

impl Counter {
    fn push(&mut self, name: impl Into<String>, params: usize, macs: usize, elems: usize) {
        self.rows.push(CostRow {
            name: name.into(),
            params: params as u64,
            flops: self.mac * macs as u64 + elems as u64,
        });
    }
}

pub fn count_cost(cfg: &CostConfig) -> Result<CostReport> {
    let (c0, h0, w0) = cfg.input;
    let (stages, convs_per, conv_bias, head_hidden): (Vec<(usize, usize)>, _, _, _) =
        match cfg.backbone {
            BackboneKind::Vgg16 => (VGG16_STAGES.to_vec(), None, true, Some(VGG16_HIDDEN)),
            BackboneKind::MicroVgg => (
                MICRO_STAGES.iter().map(|&c| (c, MICRO_CONVS)).collect(),
                Some(MICRO_CONVS),
                false,
                None,
            ),
        };
    let f = 1usize << stages.len();
    if c0 == 0 || h0 == 0 || w0 == 0 || h0 % f != 0 || w0 % f != 0 {
        return Err(Error::config(format!(
            "input {c0}x{h0}x{w0} is not divisible by 2^{} for {} pooling stages",
            stages.len(),
            stages.len()
        )));
    }
    if cfg.classes < 2 {
        return Err(Error::config("classifier needs at least 2 classes"));
    }
    let with_attn = match cfg.attention_stages {
        Some(k) if k > stages.len() => {
            return Err(Error::config(format!(
                "cannot insert attention after {k} of {} stages",
                stages.len()
            )))
        }
        Some(k) => k,
        None => match cfg.backbone {
            BackboneKind::Vgg16 => 1,
            BackboneKind::MicroVgg => stages.len(),
        },
    };

    let mut ct = Counter {
        mac: cfg.convention.factor(),
        rows: Vec::new(),
    };
    let (mut c_in, mut h, mut w) = (c0, h0, w0);
    for (i, &(c, n_conv)) in stages.iter().enumerate() {
        for j in 0..n_conv {
            let params = 9 * c_in * c + if conv_bias { c } else { 0 };
            ct.push(format!("s{i}.conv{j}"), params, 9 * c_in * c * h * w, 0);
            ct.push(format!("s{i}.bn{j}"), 2 * c, 0, c * h * w);
            ct.push(format!("s{i}.relu{j}"), 0, 0, c * h * w);
            c_in = c;
        }
        ct.push(format!("s{i}.pool"), 0, 0, c * h * w);
        h /= 2;
        w /= 2;
        if i + with_attn >= stages.len() {
            if let Some(id) = cfg.attention {
                let t = Topology::new(TopologySpec::new(id, c))?;
                let (params, macs, elems) = topology_cost(&t, c, h, w);
                ct.push(format!("s{i}.attn"), params, macs, elems);
            }
        }
    }
    let feat = c_in * h * w;
    match head_hidden {
        Some(hid) => {
            ct.push("gap", 0, 0, feat);
            ct.push("fc0", c_in * hid + hid, c_in * hid, 0);
            ct.push("fc0.relu", 0, 0, hid);
            ct.push("fc1", hid * cfg.classes + cfg.classes, hid * cfg.classes, 0);
        }
        None => ct.push(
            "head",
            feat * cfg.classes + cfg.classes,
            feat * cfg.classes,
            0,
        ),
    }

    let total_params = ct.rows.iter().map(|r| r.params).sum();
    let total_flops = ct.rows.iter().map(|r| r.flops).sum();
    Ok(CostReport {
        config: cfg.clone(),
        assumptions: assumptions(cfg, convs_per, with_attn, stages.len()),
        rows: ct.rows,
        total_params,
        total_flops,
        params_m: round3(total_params, 1_000_000),
        flops_g: round3(total_flops, 1_000_000_000),
    })
}

fn assumptions(
    cfg: &CostConfig,
    convs_per: Option<usize>,
    with_attn: usize,
    n: usize,
) -> Vec<String> {
    let mut a = match cfg.backbone {
        BackboneKind::Vgg16 => vec![
            "backbone: VGG16, 13 conv3x3 with bias + batch norm + ReLU, 5 max-pools".to_string(),
            format!(
                "head: global average pool -> FC {VGG16_HIDDEN}->{VGG16_HIDDEN} -> ReLU -> FC {VGG16_HIDDEN}->{}",
                cfg.classes
            ),
        ],
        BackboneKind::MicroVgg => vec![
            format!(
                "backbone: MicroVGG stages {:?}, {} conv3x3 (no bias) + batch norm + ReLU per stage",
                MICRO_STAGES,
                convs_per.unwrap_or(MICRO_CONVS)
            ),
            format!("head: flatten -> linear -> {} classes", cfg.classes),
        ],
    };
    if let Some(id) = cfg.attention {
        a.push(format!(
            "attention: {id} after the pooling of the last {with_attn} of {n} stage(s)"
        ));
    }
    a.push(match cfg.convention {
        FlopConvention::TwoPerMac => "FLOPs: 2 per multiply-accumulate".to_string(),
        FlopConvention::MacOnly => "FLOPs: 1 per multiply-accumulate".to_string(),
    });
    a.push("pooling, normalization, activations, elementwise ops: 1 FLOP per element".to_string());
    a
}

/// `(params, MACs, elementwise FLOPs)` of one topology on a `C×H×W` map.
fn topology_cost(t: &Topology, c: usize, h: usize, w: usize) -> (usize, usize, usize) {
    let hw = h * w;
    let chw = c * hw;
    let plan = t.plan();
    let mut total = (0, 0, 0);
    let mut add = |(p, m, e): (usize, usize, usize)| {
        total.0 += p;
        total.1 += m;
        total.2 += e;
    };
    for stage in plan
        .prefix
        .iter()
        .chain(plan.branches.iter().flatten())
        .chain(&plan.suffix)
    {
        add(match stage {
            Stage::Channel(a) => ca_cost(a, chw),
            Stage::Spatial(a) => sa_cost(a, c, hw),
        });
    }
    let b = plan.branches.len();
    let mix = (2 * b - 1) * chw;
    add(match &plan.fusion {
        Fusion::Single => (0, 0, 0),
        Fusion::Sum => (0, 0, (b - 1) * chw),
        Fusion::Sigmoid => (1, 0, 2 + mix),
        Fusion::Softmax => (b, 0, b + mix),
        Fusion::DualGate {
            ca_head, sa_head, ..
        } => {
            let (p1, m1, e1) = head_cost(ca_head, hw);
            let (p2, m2, e2) = head_cost(sa_head, hw);
            (p1 + p2, m1 + m2, e1 + e2 + 2 + mix)
        }
        Fusion::BranchGate { .. } => {
            let cin = b * c;
            (cin * b + b, cin * b, b * chw + b + mix)
        }
        Fusion::InputGate(head) => {
            let (p, m, e) = head_cost(head, hw);
            (p, m, e + 2 + mix)
        }
    });
    total
}

fn ca_cost(a: &ChannelAttention, chw: usize) -> (usize, usize, usize) {
    let (c, hid) = (a.channels(), a.hidden());
    let params = 2 * c * hid + hid + c;
    // Shared MLP on both pooled vectors.
    let macs = 2 * (c * hid + hid * c);
    // GAP + GMP, hidden ReLU, branch sum, sigmoid, rescale.
    let elems = 2 * chw + 2 * hid + c + c + chw;
    (params, macs, elems)
}

fn sa_cost(a: &SpatialAttention, c: usize, hw: usize) -> (usize, usize, usize) {
    let k = a.kernel();
    let params = 2 * k * k + 1;
    let macs = k * k * 2 * hw;
    // Channel mean + max, sigmoid, rescale.
    let elems = 2 * c * hw + hw + c * hw;
    (params, macs, elems)
}

fn head_cost(g: &GateHead, hw: usize) -> (usize, usize, usize) {
    let c = g.channels();
    let hid = c / g.ratio();
    let params = c * hid + hid + hid + 1;
    let positions = if g.pooled() { 1 } else { hw };
    let macs = positions * (c * hid + hid);
    let pool = if g.pooled() { c * hw } else { hw };
    (params, macs, pool + positions * hid)
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (c, h, w) = self.config.input;
        writeln!(
            f,
            "# {} + {} on {c}x{h}x{w}, batch 1",
            self.config.backbone,
            self.config
                .attention
                .map_or("no attention".to_string(), |id| id.to_string())
        )?;
        for a in &self.assumptions {
            writeln!(f, "# {a}")?;
        }
        writeln!(f, "{:<12} {:>12} {:>16}", "layer", "params", "flops")?;
        for r in &self.rows {
            writeln!(f, "{:<12} {:>12} {:>16}", r.name, r.params, r.flops)?;
        }
        writeln!(
            f,
            "{:<12} {:>12} {:>16}",
            "total", self.total_params, self.total_flops
        )?;
        write!(
            f,
            "Params (M) {}   FLOPs (G) {}",
            self.params_m, self.flops_g
        )
    }
}
