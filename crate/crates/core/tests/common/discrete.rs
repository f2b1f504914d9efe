//! Fully discrete worlds (binary `W`, `L1_t`, `A_t`, `Y`) whose conditional
//! probabilities are all multiples of 1/4. Replicating every history by the
//! product of its numerators gives a dataset whose empirical distribution *is*
//! the world, so saturated fits reproduce the true nuisances exactly and
//! enumeration over histories gives exact targets.

#![allow(dead_code)]

use ltmle::longdata::{Column, DatasetParts, LongitudinalDataset};
use ltmle::nuisance::{Formula, NuisanceSpec, TreatmentMechanism};

#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub w: u8,
    pub l: Vec<u8>,
    pub a: Vec<u8>,
    pub y: u8,
}

#[derive(Debug, Clone, Copy)]
pub struct World {
    pub k: usize,
}

fn pick(num1: u32, v: u8) -> u32 {
    if v == 1 {
        num1
    } else {
        4 - num1
    }
}

impl World {
    /// Numerator (over 4) of `P(L1_t = 1 | past)`.
    fn l_num(&self, t: usize, w: u8, l: &[u8], a: &[u8]) -> u32 {
        if t == 0 {
            1 + 2 * w as u32
        } else {
            1 + l[t - 1] as u32 + (a[t - 1] ^ w) as u32
        }
    }

    /// Numerator (over 4) of `P(A_t = 1 | past)`.
    fn g_num(&self, t: usize, w: u8, l: &[u8], a: &[u8]) -> u32 {
        if t == 0 {
            1 + l[0] as u32 + w as u32
        } else {
            1 + l[t] as u32 + (w ^ a[t - 1]) as u32
        }
    }

    fn y_num(&self, w: u8, l: &[u8], a: &[u8]) -> u32 {
        let k = self.k;
        1 + l[k] as u32 + (a[k] ^ w) as u32 * (1 - (k > 0 && a[0] == 0 && l[0] == 1) as u32)
    }

    pub fn p_l(&self, t: usize, w: u8, l: &[u8], a: &[u8]) -> f64 {
        self.l_num(t, w, l, a) as f64 / 4.0
    }

    pub fn g1(&self, t: usize, w: u8, l: &[u8], a: &[u8]) -> f64 {
        self.g_num(t, w, l, a) as f64 / 4.0
    }

    pub fn q_y(&self, w: u8, l: &[u8], a: &[u8]) -> f64 {
        self.y_num(w, l, a) as f64 / 4.0
    }

    /// Every history with its integer multiplicity (sum `4^(2K + 4)`).
    pub fn paths(&self) -> Vec<(Path, u64)> {
        let mut out = Vec::new();
        let mut stack = vec![(Path { w: 0, l: vec![], a: vec![], y: 0 }, 2u64), (Path { w: 1, l: vec![], a: vec![], y: 0 }, 2u64)];
        while let Some((p, m)) = stack.pop() {
            let t = p.a.len();
            if p.l.len() == t && t == self.k + 1 {
                let num = self.y_num(p.w, &p.l, &p.a);
                for y in 0..2u8 {
                    let mut q = p.clone();
                    q.y = y;
                    out.push((q, m * pick(num, y) as u64));
                }
            } else if p.l.len() == t {
                let num = self.l_num(t, p.w, &p.l, &p.a);
                for v in 0..2u8 {
                    let mut q = p.clone();
                    q.l.push(v);
                    stack.push((q, m * pick(num, v) as u64));
                }
            } else {
                let num = self.g_num(t, p.w, &p.l, &p.a);
                for v in 0..2u8 {
                    let mut q = p.clone();
                    q.a.push(v);
                    stack.push((q, m * pick(num, v) as u64));
                }
            }
        }
        out.sort_by(|x, y| (x.0.w, &x.0.l, &x.0.a, x.0.y).cmp(&(y.0.w, &y.0.l, &y.0.a, y.0.y)));
        out
    }

    pub fn total_weight(&self) -> u64 {
        4u64.pow(2 * self.k as u32 + 4)
    }

    /// Replicated dataset and the path of each row.
    pub fn dataset(&self) -> (LongitudinalDataset<f64>, Vec<Path>) {
        let mut rows = Vec::new();
        for (p, m) in self.paths() {
            for _ in 0..m {
                rows.push(p.clone());
            }
        }
        let col = |f: &dyn Fn(&Path) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
        let parts = DatasetParts {
            baseline: vec![Column::new("W", col(&|p| p.w as f64)), Column::new("L1_0", col(&|p| p.l[0] as f64))],
            covariates: (1..=self.k).map(|t| vec![Column::new(format!("L1_{t}"), col(&|p| p.l[t] as f64))]).collect(),
            treatments: (0..=self.k).map(|t| rows.iter().map(|p| p.a[t]).collect()).collect(),
            outcome: col(&|p| p.y as f64),
            outcome_range: None,
            event: None,
        };
        (LongitudinalDataset::from_parts(parts).unwrap(), rows)
    }

    /// True treatment mechanism evaluated at each row's history.
    pub fn mechanism(&self, data: &LongitudinalDataset<f64>, rows: &[Path]) -> TreatmentMechanism<f64> {
        let p1 = (0..=self.k).map(|t| rows.iter().map(|p| self.g1(t, p.w, &p.l, &p.a)).collect()).collect();
        TreatmentMechanism::from_probabilities(data, p1, 0.0).unwrap()
    }

    /// Saturated outcome-regression formulas in `W, L1_0, ..., L1_{t-1}`.
    pub fn saturated_spec(&self) -> NuisanceSpec {
        let q = (1..=self.k + 1)
            .map(|level| {
                let vars: Vec<String> =
                    std::iter::once("W".to_string()).chain((0..level).map(|s| format!("L1_{s}"))).collect();
                let terms: Vec<String> = (1u32..(1 << vars.len()))
                    .map(|mask| {
                        (0..vars.len()).filter(|j| mask & (1 << j) != 0).map(|j| vars[j].as_str()).collect::<Vec<_>>().join("*")
                    })
                    .collect();
                Formula::parse(&terms.join(",")).unwrap()
            })
            .collect();
        NuisanceSpec { g: vec![Formula::intercept()], q, truncation: 0.0, counting_process: false }
    }

    /// `Q_t(w, l(0..t-1))` under static regime `d`, levels `1..=K+1`.
    pub fn q_bar(&self, d: &[u8], level: usize, w: u8, l: &[u8]) -> f64 {
        if level == self.k + 1 {
            return self.q_y(w, &l[..=self.k], d);
        }
        let p1 = self.p_l(level, w, l, d);
        let mut l1 = l[..level].to_vec();
        l1.push(1);
        let mut l0 = l[..level].to_vec();
        l0.push(0);
        p1 * self.q_bar(d, level + 1, w, &l1) + (1.0 - p1) * self.q_bar(d, level + 1, w, &l0)
    }

    pub fn psi(&self, d: &[u8]) -> f64 {
        let mut s = 0.0;
        for w in 0..2u8 {
            for l0 in 0..2u8 {
                let pl = self.p_l(0, w, &[], d);
                s += 0.5 * if l0 == 1 { pl } else { 1.0 - pl } * self.q_bar(d, 1, w, &[l0]);
            }
        }
        s
    }

    /// Level-`level` value of `Q` along a path (`K + 2` is `Y`).
    pub fn q_path(&self, d: &[u8], level: usize, p: &Path) -> f64 {
        if level == self.k + 2 {
            p.y as f64
        } else {
            self.q_bar(d, level, p.w, &p.l[..level])
        }
    }

    /// `H_t = I(A(0..t-1) = d) / g_{0:t-1}` along a path.
    pub fn clever(&self, d: &[u8], t: usize, p: &Path) -> f64 {
        let mut g = 1.0;
        for s in 0..t {
            if p.a[s] != d[s] {
                return 0.0;
            }
            let g1 = self.g1(s, p.w, &p.l, &p.a);
            g *= if d[s] == 1 { g1 } else { 1.0 - g1 };
        }
        1.0 / g
    }

    /// Per-time EIF components `D*_t`, `t = 0..=K+1`, for regime `d`.
    pub fn eif_components(&self, d: &[u8], p: &Path) -> Vec<f64> {
        let mut out = vec![self.q_path(d, 1, p) - self.psi(d)];
        for t in 1..=self.k + 1 {
            out.push(self.clever(d, t, p) * (self.q_path(d, t + 1, p) - self.q_path(d, t, p)));
        }
        out
    }

    pub fn eif(&self, d: &[u8], p: &Path) -> f64 {
        self.eif_components(d, p).iter().sum()
    }

    /// `E f(O)` under the world.
    pub fn expect(&self, f: impl Fn(&Path) -> f64) -> f64 {
        let total = self.total_weight() as f64;
        self.paths().iter().map(|(p, m)| *m as f64 * f(p)).sum::<f64>() / total
    }
}
