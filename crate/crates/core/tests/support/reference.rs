//! Straight-line scalar-loop versions of every topology, written from the
//! defining equations with nothing shared with the library but parameter
//! names. Everything is evaluated in f64.

use attnlab_core::params::ParamStore;
use attnlab_core::topology::TopologyId;

/// Dense `N×C×H×W` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct Map {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Map {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Map {
        Map {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(n, c, y, x)]
    }

    fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(n, c, y, x);
        self.data[i] = v;
    }
}

struct Params<'a>(&'a ParamStore<f32>);

impl Params<'_> {
    fn get(&self, name: &str) -> (Vec<f64>, [usize; 4]) {
        let t = self
            .0
            .value(name)
            .unwrap_or_else(|_| panic!("missing parameter {name}"));
        (
            t.data().iter().map(|&v| v as f64).collect(),
            t.shape().dims(),
        )
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `σ(W₂ReLU(W₁·avg + b₁) + b₂ + W₂ReLU(W₁·max + b₁) + b₂) ⊙ x`
fn ca(p: &Params, prefix: &str, x: &Map) -> Map {
    let (wd, sd) = p.get(&format!("{prefix}mlp_down.weight"));
    let (bd, _) = p.get(&format!("{prefix}mlp_down.bias"));
    let (wu, _) = p.get(&format!("{prefix}mlp_up.weight"));
    let (bu, _) = p.get(&format!("{prefix}mlp_up.bias"));
    let hidden = sd[0];
    let c = x.c;
    let hw = (x.h * x.w) as f64;
    let mut out = x.clone();
    for n in 0..x.n {
        let mut avg = vec![0.0; c];
        let mut max = vec![f64::NEG_INFINITY; c];
        for ch in 0..c {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let v = x.get(n, ch, y, xx);
                    avg[ch] += v;
                    max[ch] = max[ch].max(v);
                }
            }
            avg[ch] /= hw;
        }
        let mut logit = vec![0.0; c];
        for pooled in [&avg, &max] {
            let mut h = vec![0.0; hidden];
            for j in 0..hidden {
                let mut s = bd[j];
                for ch in 0..c {
                    s += wd[j * c + ch] * pooled[ch];
                }
                h[j] = s.max(0.0);
            }
            for ch in 0..c {
                let mut s = bu[ch];
                for j in 0..hidden {
                    s += wu[ch * hidden + j] * h[j];
                }
                logit[ch] += s;
            }
        }
        for ch in 0..c {
            let g = sigmoid(logit[ch]);
            for y in 0..x.h {
                for xx in 0..x.w {
                    out.set(n, ch, y, xx, x.get(n, ch, y, xx) * g);
                }
            }
        }
    }
    out
}

/// `σ(conv_k([mean_c x; max_c x])) ⊙ x` with zero padding.
fn sa(p: &Params, prefix: &str, x: &Map) -> Map {
    let (wt, s) = p.get(&format!("{prefix}conv.weight"));
    let (b, _) = p.get(&format!("{prefix}conv.bias"));
    let k = s[2];
    let pad = (k / 2) as isize;
    let mut out = x.clone();
    for n in 0..x.n {
        let mut maps = [vec![0.0; x.h * x.w], vec![f64::NEG_INFINITY; x.h * x.w]];
        for y in 0..x.h {
            for xx in 0..x.w {
                for ch in 0..x.c {
                    let v = x.get(n, ch, y, xx);
                    maps[0][y * x.w + xx] += v / x.c as f64;
                    maps[1][y * x.w + xx] = maps[1][y * x.w + xx].max(v);
                }
            }
        }
        for y in 0..x.h {
            for xx in 0..x.w {
                let mut logit = b[0];
                for (i, m) in maps.iter().enumerate() {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = y as isize + ky as isize - pad;
                            let ix = xx as isize + kx as isize - pad;
                            if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                continue;
                            }
                            logit += wt[(i * k + ky) * k + kx] * m[iy as usize * x.w + ix as usize];
                        }
                    }
                }
                let g = sigmoid(logit);
                for ch in 0..x.c {
                    out.set(n, ch, y, xx, x.get(n, ch, y, xx) * g);
                }
            }
        }
    }
    out
}

/// Per-sample scalar logit `up(ReLU(down(v)))`; `v` is the GAP vector when
/// `pooled`, otherwise every position is mapped and the results averaged.
fn gate_logits(p: &Params, prefix: &str, x: &Map, pooled: bool) -> Vec<f64> {
    let (wd, sd) = p.get(&format!("{prefix}down.weight"));
    let (bd, _) = p.get(&format!("{prefix}down.bias"));
    let (wu, _) = p.get(&format!("{prefix}up.weight"));
    let (bu, _) = p.get(&format!("{prefix}up.bias"));
    let hidden = sd[0];
    let head = |v: &[f64]| -> f64 {
        let mut o = bu[0];
        for j in 0..hidden {
            let mut s = bd[j];
            for (ch, &vc) in v.iter().enumerate() {
                s += wd[j * x.c + ch] * vc;
            }
            o += wu[j] * s.max(0.0);
        }
        o
    };
    (0..x.n)
        .map(|n| {
            if pooled {
                head(&gap(x, n))
            } else {
                let mut total = 0.0;
                for y in 0..x.h {
                    for xx in 0..x.w {
                        let v: Vec<f64> = (0..x.c).map(|ch| x.get(n, ch, y, xx)).collect();
                        total += head(&v);
                    }
                }
                total / (x.h * x.w) as f64
            }
        })
        .collect()
}

fn gap(x: &Map, n: usize) -> Vec<f64> {
    (0..x.c)
        .map(|ch| {
            let mut s = 0.0;
            for y in 0..x.h {
                for xx in 0..x.w {
                    s += x.get(n, ch, y, xx);
                }
            }
            s / (x.h * x.w) as f64
        })
        .collect()
}

/// Per-sample softmax of a linear map over the concatenated GAP vectors of
/// `inputs`.
fn gate3(p: &Params, prefix: &str, inputs: [&Map; 3]) -> Vec<[f64; 3]> {
    let (wt, s) = p.get(&format!("{prefix}weight"));
    let (b, _) = p.get(&format!("{prefix}bias"));
    let cols = s[1];
    (0..inputs[0].n)
        .map(|n| {
            let cat: Vec<f64> = inputs.iter().flat_map(|m| gap(m, n)).collect();
            assert_eq!(cat.len(), cols);
            let z: Vec<f64> = (0..3)
                .map(|i| b[i] + (0..cols).map(|k| wt[i * cols + k] * cat[k]).sum::<f64>())
                .collect();
            let w = softmax(&z);
            [w[0], w[1], w[2]]
        })
        .collect()
}

/// `Σ_i w[n][i] · maps[i]` with per-sample weights.
fn mix(maps: &[&Map], w: impl Fn(usize, usize) -> f64) -> Map {
    let m0 = maps[0];
    let mut out = Map::zeros(m0.n, m0.c, m0.h, m0.w);
    for n in 0..m0.n {
        for ch in 0..m0.c {
            for y in 0..m0.h {
                for xx in 0..m0.w {
                    let v = maps
                        .iter()
                        .enumerate()
                        .map(|(i, m)| w(n, i) * m.get(n, ch, y, xx))
                        .sum();
                    out.set(n, ch, y, xx, v);
                }
            }
        }
    }
    out
}

fn scalar(p: &Params, name: &str) -> Vec<f64> {
    p.get(name).0
}

pub fn forward(id: TopologyId, store: &ParamStore<f32>, x: &Map) -> Map {
    use TopologyId::*;
    let p = &Params(store);
    match id {
        Ca => ca(p, "b0.ca0.", x),
        Sa => sa(p, "b0.sa0.", x),
        Csa => sa(p, "b0.sa1.", &ca(p, "b0.ca0.", x)),
        Sca => ca(p, "b0.ca1.", &sa(p, "b0.sa0.", x)),
        Csca => ca(p, "b0.ca2.", &sa(p, "b0.sa1.", &ca(p, "b0.ca0.", x))),
        Scsa => sa(p, "b0.sa2.", &ca(p, "b0.ca1.", &sa(p, "b0.sa0.", x))),
        CSa2 => {
            let s = sa(p, "b0.sa0.", x);
            let c = ca(p, "b1.ca0.", x);
            mix(&[&s, &c], |_, _| 1.0)
        }
        CSafa => {
            let wf = sigmoid(scalar(p, "fuse.logit")[0]);
            let c = ca(p, "b0.ca0.", x);
            let s = sa(p, "b1.sa0.", x);
            mix(&[&c, &s], |_, i| if i == 0 { wf } else { 1.0 - wf })
        }
        BiCsa | BiCsafa => {
            let a = sa(p, "b0.sa1.", &ca(p, "b0.ca0.", x));
            let b = ca(p, "b1.ca1.", &sa(p, "b1.sa0.", x));
            let w = if id == BiCsa {
                vec![1.0, 1.0]
            } else {
                softmax(&scalar(p, "fuse.logits"))
            };
            mix(&[&a, &b], |_, i| w[i])
        }
        GcSa2 => {
            let xca = ca(p, "b0.ca0.", x);
            let xsa = sa(p, "b1.sa0.", x);
            let g1 = gate_logits(p, "fuse.gate_ca.", &xca, true);
            let g2 = gate_logits(p, "fuse.gate_sa.", &xsa, false);
            let w: Vec<Vec<f64>> = g1
                .iter()
                .zip(&g2)
                .map(|(&a, &b)| softmax(&[a, b]))
                .collect();
            mix(&[&xca, &xsa], |n, i| w[n][i])
        }
        Tgpfa => {
            let xca = ca(p, "b1.ca0.", x);
            let xsa = sa(p, "b2.sa0.", x);
            let w = gate3(p, "fuse.gate.", [&xca, &xsa, x]);
            mix(&[x, &xca, &xsa], |n, i| w[n][i])
        }
        Rcsa => {
            let a = sa(p, "b1.sa1.", &ca(p, "b1.ca0.", x));
            mix(&[x, &a], |_, _| 1.0)
        }
        Arcsa => {
            let wl = sigmoid(scalar(p, "fuse.logit")[0]);
            let a = sa(p, "b0.sa1.", &ca(p, "b0.ca0.", x));
            mix(&[x, &a], |_, i| if i == 0 { 1.0 - wl } else { wl })
        }
        Grcsa => {
            let wm: Vec<f64> = gate_logits(p, "fuse.gate.", x, true)
                .into_iter()
                .map(sigmoid)
                .collect();
            let a = sa(p, "b0.sa1.", &ca(p, "b0.ca0.", x));
            mix(&[x, &a], |n, i| if i == 0 { 1.0 - wm[n] } else { wm[n] })
        }
        CMssa => {
            let u = ca(p, "pre.ca0.", x);
            let x1 = sa(p, "b0.sa0.", &u);
            let x2 = sa(p, "b1.sa0.", &u);
            let x3 = sa(p, "b2.sa0.", &u);
            let w = gate3(p, "fuse.gate.", [&x1, &x2, &x3]);
            mix(&[&x1, &x2, &x3], |n, i| w[n][i])
        }
        MscSa => {
            let x1 = ca(p, "b0.ca0.", x);
            let x2 = ca(p, "b1.ca0.", x);
            let x3 = ca(p, "b2.ca0.", x);
            let w = gate3(p, "fuse.gate.", [&x1, &x2, &x3]);
            sa(p, "post.sa0.", &mix(&[&x1, &x2, &x3], |n, i| w[n][i]))
        }
        CCmssa => {
            let u = ca(p, "b0.ca0.", x);
            sa(p, "b0.sa3.", &sa(p, "b0.sa2.", &sa(p, "b0.sa1.", &u)))
        }
    }
}
