//! Human-readable summary of one topology.

use std::fmt::Write;

use crate::error::Result;
use crate::topology::{enumerate_params, Fusion, Topology, TopologyId, TopologySpec};

/// Category, composition, fusion rule, size knobs, parameter inventory at
/// `channels`, and where the guidelines place it.
pub fn describe(id: TopologyId, channels: usize) -> Result<String> {
    let spec = TopologySpec::new(id, channels);
    let topo = Topology::new(spec)?;
    let params = enumerate_params(&spec)?;
    let mut out = String::new();
    let w = &mut out;
    // Writing to a String cannot fail.
    let _ = writeln!(w, "{}", id.name());
    let _ = writeln!(w, "category: {}", id.category());
    let _ = writeln!(w, "equation: {}", id.equation());
    let _ = writeln!(
        w,
        "fusion: {}",
        fusion_text(&topo.plan().fusion, topo.branch_count())
    );
    let _ = writeln!(w, "sizes: {}", sizes_text(&spec));
    let _ = writeln!(w, "parameters at C={channels}:");
    for p in &params {
        let _ = writeln!(
            w,
            "  {:<28} {:<14} {}",
            p.name,
            p.shape.to_string(),
            p.count
        );
    }
    let _ = writeln!(
        w,
        "  total {}",
        params.iter().map(|p| p.count).sum::<usize>()
    );
    let _ = write!(w, "recommended for: {}", regime_text(id));
    Ok(out)
}

fn fusion_text(f: &Fusion, branches: usize) -> String {
    match f {
        Fusion::Single => "none (single path)".into(),
        Fusion::Sum => format!("unweighted sum of {branches} branches"),
        Fusion::Sigmoid => "2-way fusion, w = sigmoid of one learnable logit".into(),
        Fusion::Softmax => format!("{branches}-way softmax over learnable logits"),
        Fusion::DualGate { .. } => {
            "2-way per-sample softmax of a pooled and an unpooled gate head".into()
        }
        Fusion::BranchGate { .. } => format!(
            "{branches}-way per-sample softmax fusion, linear gate on the concatenated branch GAPs"
        ),
        Fusion::InputGate(_) => "per-sample sigmoid gate from a pooled head on the input".into(),
    }
}

fn sizes_text(spec: &TopologySpec) -> String {
    use TopologyId::*;
    let [r1, r2, r3] = spec.multi_ratios;
    let [k1, k2, k3] = spec.multi_kernels;
    match spec.id {
        Ca => format!("squeeze ratio {}", spec.ratio),
        Sa => format!("kernel {}", spec.kernel),
        MscSa => format!(
            "squeeze ratios {{{r1},{r2},{r3}}}, final SA kernel {}",
            spec.kernel
        ),
        CMssa | CCmssa => format!(
            "squeeze ratio {}, SA kernels {{{k1},{k2},{k3}}}",
            spec.ratio
        ),
        _ => format!("squeeze ratio {}, SA kernel {}", spec.ratio, spec.kernel),
    }
}

fn regime_text(id: TopologyId) -> &'static str {
    use TopologyId::*;
    match id {
        CCmssa => "small datasets (N < 1000)",
        CSafa | BiCsafa => "medium datasets (1000 <= N <= 50000)",
        GcSa2 => "large datasets (N > 50000)",
        Sca => "fine-grained tasks at any scale (spatial-then-channel order)",
        Rcsa => "fine-grained tasks at any scale (residual connection)",
        _ => "not singled out by the guidelines",
    }
}
