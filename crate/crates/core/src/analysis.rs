//! Post-hoc diagnostics: gradient interference between timestep bins,
//! message sweeps over a frozen victim, training-curve aggregation, a
//! rank-sum test and SVG rendering.

use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::cheaptalk::{augment, ChannelConfig, ChannelError};
use crate::ppo::{self, compute_gae_batch, normalize_advantages, ActorCritic, PpoConfig, PpoError, TrajectoryBatch};

pub const INTERFERENCE_BINS: usize = 10;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InterferenceMatrix {
    pub bins: usize,
    /// `matrix[i][j]` = `1 - cos(g_i, g_j)`; `None` when a bin is empty or
    /// its gradient is zero.
    pub matrix: Vec<Vec<Option<f64>>>,
    /// Smallest and largest within-episode timestep of each bin.
    pub bin_steps: Vec<(u32, u32)>,
    /// Which loss the gradients are taken of.
    pub gradient: &'static str,
}

impl InterferenceMatrix {
    /// Mean of the defined entries `(i, j)` with `i` in `rows`, `j` in
    /// `cols` and `i != j`.
    pub fn block_mean(&self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Option<f64> {
        let vals: Vec<f64> = rows
            .flat_map(|i| cols.clone().map(move |j| (i, j)))
            .filter(|(i, j)| i != j)
            .filter_map(|(i, j)| self.matrix[i][j])
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Mean distance between the first `k` and the last `k` bins.
    pub fn early_late(&self, k: usize) -> Option<f64> {
        self.block_mean(0..k, self.bins - k..self.bins)
    }

    pub fn late_late(&self, k: usize) -> Option<f64> {
        self.block_mean(self.bins - k..self.bins, self.bins - k..self.bins)
    }
}

/// `1 - cos(a, b)` clamped to `[0, 2]`; `None` if either vector is zero.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>();
    let nb = b.iter().map(|x| x * x).sum::<f64>();
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Some((1.0 - dot / (na * nb).sqrt()).clamp(0.0, 2.0))
}

/// Pairwise cosine distances; the diagonal is exactly 0 for defined rows.
pub fn distance_matrix(grads: &[Option<Vec<f64>>]) -> Vec<Vec<Option<f64>>> {
    let n = grads.len();
    let mut m = vec![vec![None; n]; n];
    for i in 0..n {
        for j in i..n {
            let d = match (&grads[i], &grads[j]) {
                (Some(a), Some(b)) if i == j => cosine_distance(a, b).map(|_| 0.0),
                (Some(a), Some(b)) => cosine_distance(a, b),
                _ => None,
            };
            m[i][j] = d;
            m[j][i] = d;
        }
    }
    m
}

/// Transition indices split into `bins` equal-count groups ordered by
/// within-episode timestep (ties by buffer index).
pub fn timestep_bins(batch: &TrajectoryBatch, bins: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.sort_by_key(|&i| (batch.episode_steps[i], i));
    let n = order.len();
    (0..bins).map(|b| order[b * n / bins..(b + 1) * n / bins].to_vec()).collect()
}

/// Per-bin gradients of the combined PPO loss at `victim`. Advantages are
/// normalized over the whole buffer before binning.
pub fn bin_gradients(
    victim: &ActorCritic,
    batch: &TrajectoryBatch,
    config: &PpoConfig,
    bins: &[Vec<usize>],
) -> Result<Vec<Option<Vec<f64>>>, AnalysisError> {
    let (mut adv, returns) = compute_gae_batch(batch, config.gamma, config.gae_lambda);
    normalize_advantages(&mut adv);
    bins.iter()
        .map(|idx| {
            if idx.is_empty() {
                return Ok(None);
            }
            let (_, g) = ppo::loss_gradient(victim, batch, idx, &adv, &returns, config)?;
            let zero = g.iter().all(|x| *x == 0.0);
            Ok((!zero).then_some(g))
        })
        .collect()
}

/// Cosine distances between gradient updates computed on timestep bins of
/// `buffer`, evaluated at the checkpoint that collected it.
pub fn interference_matrix(
    victim: &ActorCritic,
    buffer: &TrajectoryBatch,
    config: &PpoConfig,
) -> Result<InterferenceMatrix, AnalysisError> {
    if buffer.is_empty() {
        return Err(AnalysisError::Empty("trajectory buffer"));
    }
    let bins = timestep_bins(buffer, INTERFERENCE_BINS);
    let bin_steps = bins
        .iter()
        .map(|b| {
            let steps = b.iter().map(|&i| buffer.episode_steps[i]);
            (steps.clone().min().unwrap_or(0), steps.max().unwrap_or(0))
        })
        .collect();
    let grads = bin_gradients(victim, buffer, config, &bins)?;
    Ok(InterferenceMatrix {
        bins: INTERFERENCE_BINS,
        matrix: distance_matrix(&grads),
        bin_steps,
        gradient: "combined ppo loss (surrogate + value + entropy), actor and critic",
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct GridSpec {
    /// Message components varied along the two axes.
    pub components: (usize, usize),
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl GridSpec {
    pub fn square(lo: f64, hi: f64, n: usize) -> Self {
        GridSpec { components: (0, 1), lo, hi, n }
    }

    pub fn points(&self) -> Vec<f64> {
        if self.n == 1 {
            return vec![(self.lo + self.hi) / 2.0];
        }
        (0..self.n).map(|i| self.lo + (self.hi - self.lo) * i as f64 / (self.n - 1) as f64).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepGrid {
    pub grid: GridSpec,
    pub probe_obs: Vec<f64>,
    /// `mean[i][j]`: mean over victims of the first component of the policy
    /// mode, with message components set to `(x_i, y_j)`.
    pub mean: Vec<Vec<f64>>,
    /// Population variance over victims, same layout.
    pub variance: Vec<Vec<f64>>,
}

impl SweepGrid {
    /// `max - min` of the mean grid.
    pub fn output_range(&self) -> f64 {
        let it = self.mean.iter().flatten();
        it.clone().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) - it.fold(f64::INFINITY, |a, &b| a.min(b))
    }

    pub fn mean_variance(&self) -> f64 {
        let n = (self.grid.n * self.grid.n) as f64;
        self.variance.iter().flatten().sum::<f64>() / n
    }
}

/// Deterministic policy output of each victim over a grid of messages at a
/// fixed probe observation. Each victim normalizes through its own
/// statistics.
pub fn message_sweep(
    victims: &[ActorCritic],
    probe_obs: &[f64],
    channel: &ChannelConfig,
    grid: &GridSpec,
) -> Result<SweepGrid, AnalysisError> {
    if victims.is_empty() {
        return Err(AnalysisError::Empty("victims"));
    }
    let (cx, cy) = grid.components;
    if cx.max(cy) >= channel.message_dim {
        return Err(AnalysisError::LengthMismatch(format!(
            "grid components {:?} outside message dim {}",
            grid.components, channel.message_dim
        )));
    }
    let pts = grid.points();
    let n = pts.len();
    let mut outputs = vec![vec![0.0; n * n]; victims.len()];
    for (v, out) in victims.iter().zip(outputs.iter_mut()) {
        let mut inputs = Vec::with_capacity(n * n * v.input_dim());
        for &x in &pts {
            for &y in &pts {
                let mut msg = vec![0.0; channel.message_dim];
                msg[cx] = x;
                msg[cy] = y;
                let aug = augment(probe_obs, &msg, channel)?;
                if aug.len() != v.input_dim() {
                    return Err(AnalysisError::LengthMismatch(format!(
                        "victim input dim {} vs augmented dim {}",
                        v.input_dim(),
                        aug.len()
                    )));
                }
                inputs.extend(v.obs_norm.normalize(&aug));
            }
        }
        for (o, m) in out.iter_mut().zip(v.mode(&inputs, n * n)?) {
            *o = m[0];
        }
    }
    let k = victims.len() as f64;
    let mut mean = vec![vec![0.0; n]; n];
    let mut variance = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let c = i * n + j;
            let mu = outputs.iter().map(|o| o[c]).sum::<f64>() / k;
            mean[i][j] = mu;
            variance[i][j] = outputs.iter().map(|o| (o[c] - mu) * (o[c] - mu)).sum::<f64>() / k;
        }
    }
    Ok(SweepGrid { grid: grid.clone(), probe_obs: probe_obs.to_vec(), mean, variance })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Curves {
    pub mean: Vec<f64>,
    /// Sample standard deviation over `sqrt(n)`; 0 when `n = 1`.
    pub stderr: Vec<f64>,
    pub n: usize,
}

pub fn aggregate_curves(traces: &[Vec<f64>]) -> Result<Curves, AnalysisError> {
    let first = traces.first().ok_or(AnalysisError::Empty("traces"))?;
    let len = first.len();
    if let Some(t) = traces.iter().find(|t| t.len() != len) {
        return Err(AnalysisError::LengthMismatch(format!("trace of length {} vs {len}", t.len())));
    }
    let n = traces.len();
    if n == 1 {
        log::info!("aggregate_curves: single trace, standard error reported as 0");
    }
    let mut mean = vec![0.0; len];
    let mut stderr = vec![0.0; len];
    for t in 0..len {
        // Sum in a fixed order so permuted inputs give identical sums.
        let mut col: Vec<f64> = traces.iter().map(|tr| tr[t]).collect();
        col.sort_by(f64::total_cmp);
        let mu = col.iter().sum::<f64>() / n as f64;
        mean[t] = mu;
        if n > 1 {
            let var = col.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (n - 1) as f64;
            stderr[t] = (var / n as f64).sqrt();
        }
    }
    Ok(Curves { mean, stderr, n })
}

/// One-sided Wilcoxon rank-sum test of `x < y`: the exact permutation
/// p-value `P(W_x <= w_obs)`, with midranks for ties.
pub fn rank_sum_less(x: &[f64], y: &[f64]) -> f64 {
    let (nx, n) = (x.len(), x.len() + y.len());
    if nx == 0 || y.is_empty() {
        return 1.0;
    }
    let mut all: Vec<(f64, bool)> = x.iter().map(|&v| (v, true)).chain(y.iter().map(|&v| (v, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Doubled midranks are integers.
    let mut ranks2 = vec![0usize; n];
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && all[j].0 == all[i].0 {
            j += 1;
        }
        for r in &mut ranks2[i..j] {
            *r = i + j + 1;
        }
        i = j;
    }
    let observed: usize = ranks2.iter().zip(&all).filter(|(_, a)| a.1).map(|(r, _)| r).sum();
    let max_sum: usize = ranks2.iter().sum();
    // counts[k][s]: subsets of size k with doubled rank sum s.
    let mut counts = vec![vec![0f64; max_sum + 1]; nx + 1];
    counts[0][0] = 1.0;
    for &r in &ranks2 {
        for k in (1..=nx).rev() {
            for s in (r..=max_sum).rev() {
                counts[k][s] += counts[k - 1][s - r];
            }
        }
    }
    let total: f64 = counts[nx].iter().sum();
    counts[nx][..=observed].iter().sum::<f64>() / total
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 480.0;
const MARGIN: f64 = 70.0;

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, SVG_W / 2.0, escape(title));
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axis_labels(s: &mut String, xlabel: &str, ylabel: &str) {
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, SVG_W / 2.0, SVG_H - 15.0, escape(xlabel));
    let _ = writeln!(
        s,
        r#"<text x="18" y="{y}" text-anchor="middle" transform="rotate(-90 18 {y})">{}</text>"#,
        escape(ylabel),
        y = SVG_H / 2.0
    );
}

/// Diverging white-to-red ramp over `[lo, hi]`.
fn color(v: f64, lo: f64, hi: f64) -> String {
    let t = if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 };
    let g = (255.0 * (1.0 - t)).round() as u8;
    format!("rgb(255,{g},{g})")
}

/// Heatmap of `cells[row][col]`; missing cells are drawn grey.
pub fn svg_heatmap(
    cells: &[Vec<Option<f64>>],
    x_ticks: &[String],
    y_ticks: &[String],
    title: &str,
    xlabel: &str,
    ylabel: &str,
) -> String {
    let rows = cells.len();
    let cols = cells.first().map_or(0, Vec::len);
    let defined = cells.iter().flatten().flatten();
    let lo = defined.clone().fold(f64::INFINITY, |a, &b| a.min(b));
    let hi = defined.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut s = svg_open(title);
    let (w, h) = (SVG_W - 2.0 * MARGIN - 60.0, SVG_H - 2.0 * MARGIN);
    let (cw, ch) = (w / cols.max(1) as f64, h / rows.max(1) as f64);
    for (i, row) in cells.iter().enumerate() {
        for (j, c) in row.iter().enumerate() {
            let fill = c.map_or_else(|| "rgb(200,200,200)".to_string(), |v| color(v, lo, hi));
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{fill}"/>"#,
                MARGIN + j as f64 * cw,
                MARGIN + i as f64 * ch,
                cw,
                ch
            );
        }
    }
    let step = |n: usize| (n / 10).max(1);
    for (j, t) in x_ticks.iter().enumerate().step_by(step(x_ticks.len())) {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="10">{}</text>"#,
            MARGIN + (j as f64 + 0.5) * cw,
            MARGIN + h + 14.0,
            escape(t)
        );
    }
    for (i, t) in y_ticks.iter().enumerate().step_by(step(y_ticks.len())) {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-size="10">{}</text>"#,
            MARGIN - 4.0,
            MARGIN + (i as f64 + 0.5) * ch + 3.0,
            escape(t)
        );
    }
    if lo.is_finite() {
        let x = MARGIN + w + 20.0;
        for k in 0..20 {
            let v = hi - (hi - lo) * k as f64 / 19.0;
            let _ = writeln!(
                s,
                r#"<rect x="{x}" y="{:.2}" width="16" height="{:.2}" fill="{}"/>"#,
                MARGIN + k as f64 * h / 20.0,
                h / 20.0,
                color(v, lo, hi)
            );
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="10">{hi:.3}</text>"#, x + 20.0, MARGIN + 8.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="10">{lo:.3}</text>"#, x + 20.0, MARGIN + h);
    }
    axis_labels(&mut s, xlabel, ylabel);
    s.push_str("</svg>\n");
    s
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#7f7f7f"];

/// Line plot of `(name, mean, stderr)` series with shaded ±1 stderr bands.
pub fn svg_line_plot(series: &[(String, Curves)], title: &str, xlabel: &str, ylabel: &str) -> String {
    let mut s = svg_open(title);
    let finite = |v: &f64| v.is_finite();
    let vals = series.iter().flat_map(|(_, c)| {
        c.mean.iter().zip(&c.stderr).flat_map(|(m, e)| [m - e, m + e]).filter(finite).collect::<Vec<_>>()
    });
    let lo = vals.clone().fold(f64::INFINITY, f64::min);
    let hi = vals.fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (lo - 1.0, lo + 1.0) };
    let len = series.iter().map(|(_, c)| c.mean.len()).max().unwrap_or(1).max(2);
    let (w, h) = (SVG_W - 2.0 * MARGIN, SVG_H - 2.0 * MARGIN);
    let px = |i: usize| MARGIN + w * i as f64 / (len - 1) as f64;
    let py = |v: f64| MARGIN + h * (1.0 - (v - lo) / (hi - lo));
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{w}" height="{h}" fill="none" stroke="black" stroke-width="0.5"/>"#
    );
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end" font-size="10">{v:.3}</text>"#, MARGIN - 4.0, py(v) + 3.0);
        let i = (len - 1) * k / 4;
        let _ = writeln!(s, r#"<text x="{:.2}" y="{}" text-anchor="middle" font-size="10">{i}</text>"#, px(i), MARGIN + h + 14.0);
    }
    for (k, (name, c)) in series.iter().enumerate() {
        let col = PALETTE[k % PALETTE.len()];
        let pts: Vec<(usize, f64, f64)> =
            c.mean.iter().zip(&c.stderr).enumerate().filter(|(_, (m, _))| m.is_finite()).map(|(i, (m, e))| (i, *m, *e)).collect();
        if pts.is_empty() {
            continue;
        }
        let mut band = String::new();
        for &(i, m, e) in &pts {
            let _ = write!(band, "{:.2},{:.2} ", px(i), py(m + e));
        }
        for &(i, m, e) in pts.iter().rev() {
            let _ = write!(band, "{:.2},{:.2} ", px(i), py(m - e));
        }
        let _ = writeln!(s, r#"<polygon points="{}" fill="{col}" fill-opacity="0.2" stroke="none"/>"#, band.trim_end());
        let line: Vec<String> = pts.iter().map(|&(i, m, _)| format!("{:.2},{:.2}", px(i), py(m))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{col}" stroke-width="1.5"/>"#, line.join(" "));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{col}">{}</text>"#,
            MARGIN + 8.0,
            MARGIN + 16.0 + 14.0 * k as f64,
            escape(name)
        );
    }
    axis_labels(&mut s, xlabel, ylabel);
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cheaptalk::{Adversary, ChannelMode};
    use crate::envs::{ActionSpace, EnvKind};
    use crate::rng;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn identical_gradients_give_zero_matrix() {
        let g = vec![Some(vec![1.0, 2.0, -3.0]); 4];
        let m = distance_matrix(&g);
        assert!(m.iter().flatten().all(|d| d.unwrap().abs() < 1e-12));
    }

    #[test]
    fn antipodal_gradients_give_two() {
        let m = distance_matrix(&[Some(vec![1.0, -2.0]), Some(vec![-1.0, 2.0])]);
        assert_eq!(m[0][1], Some(2.0));
        assert_eq!(m[0][0], Some(0.0));
    }

    #[test]
    fn zero_gradient_is_missing() {
        let m = distance_matrix(&[Some(vec![0.0, 0.0]), Some(vec![1.0, 0.0]), None]);
        assert_eq!(m[0][1], None);
        assert_eq!(m[2][2], None);
        assert_eq!(m[1][1], Some(0.0));
    }

    #[test]
    fn independent_gaussian_gradients_are_near_orthogonal() {
        let mut r = rng::stream(5);
        let g: Vec<Option<Vec<f64>>> =
            (0..4).map(|_| Some((0..20_000).map(|_| StandardNormal.sample(&mut r)).collect())).collect();
        let m = distance_matrix(&g);
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert!((m[i][j].unwrap() - 1.0).abs() < 0.05);
                }
            }
        }
    }

    #[test]
    fn curves_single_trace_and_two_constants() {
        let c = aggregate_curves(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(c.stderr, vec![0.0, 0.0]);
        let c = aggregate_curves(&[vec![3.0; 3], vec![1.0; 3]]).unwrap();
        assert!(c.mean.iter().all(|m| (m - 2.0).abs() < 1e-15));
        assert!(c.stderr.iter().all(|e| (e - 1.0).abs() < 1e-15));
        assert!(aggregate_curves(&[]).is_err());
        assert!(aggregate_curves(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn rank_sum_exact_values() {
        // Complete separation with 3 vs 3: 1 / C(6, 3).
        assert!((rank_sum_less(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]) - 0.05).abs() < 1e-12);
        assert_eq!(rank_sum_less(&[4.0, 5.0, 6.0], &[1.0, 2.0, 3.0]), 1.0);
        // All tied: every arrangement has the same sum.
        assert_eq!(rank_sum_less(&[1.0, 1.0], &[1.0, 1.0]), 1.0);
        let p = rank_sum_less(&(0..10).map(f64::from).collect::<Vec<_>>(), &(10..20).map(f64::from).collect::<Vec<_>>());
        assert!(p < 1e-5);
    }

    fn small_victim(seed: u64, space: ActionSpace, input_dim: usize) -> ActorCritic {
        let cfg = PpoConfig { actor_hidden: vec![8], critic_hidden: vec![8], ..PpoConfig::pendulum() };
        ActorCritic::new(input_dim, space, &cfg, &mut rng::stream(seed)).unwrap()
    }

    #[test]
    fn sweep_single_victim_has_zero_variance_and_matches_zero_message() {
        let ch = ChannelConfig::default();
        let v = small_victim(1, ActionSpace::Continuous(1), 5);
        let probe = [0.3, -0.9, 0.5];
        let grid = GridSpec::square(-1.0, 1.0, 5);
        let sweep = message_sweep(std::slice::from_ref(&v), &probe, &ch, &grid).unwrap();
        assert!(sweep.variance.iter().flatten().all(|&x| x == 0.0));
        let zero_cell = sweep.mean[2][2];
        let aug = augment(&probe, &Adversary::Zeroes(2).message(&probe, None, 1.0).unwrap(), &ch).unwrap();
        let direct = v.mode(&v.obs_norm.normalize(&aug), 1).unwrap()[0][0];
        assert_eq!(zero_cell.to_bits(), direct.to_bits());
        let again = message_sweep(std::slice::from_ref(&v), &probe, &ch, &grid).unwrap();
        assert_eq!(sweep, again);
    }

    #[test]
    fn sweep_rejects_bad_dims() {
        let v = small_victim(1, ActionSpace::Continuous(1), 5);
        let ch = ChannelConfig { mode: ChannelMode::Append, ..ChannelConfig::default() };
        assert!(message_sweep(std::slice::from_ref(&v), &[0.0; 4], &ch, &GridSpec::square(-1.0, 1.0, 3)).is_err());
        let bad = GridSpec { components: (0, 2), ..GridSpec::square(-1.0, 1.0, 3) };
        assert!(message_sweep(&[v], &[0.0; 3], &ch, &bad).is_err());
    }

    fn tiny_buffer(seed: u64) -> (ActorCritic, TrajectoryBatch, PpoConfig) {
        let cfg = PpoConfig { n_updates: 2, rollout_len: 64, ..PpoConfig::cartpole() };
        let out = ppo::train_victim_with_snapshot(
            EnvKind::CartPole,
            &Adversary::Zeroes(2),
            &ChannelConfig::default(),
            &cfg,
            seed,
            Some(1),
        )
        .unwrap();
        let (v, b) = out.snapshot.unwrap();
        (v, b, cfg)
    }

    #[test]
    fn interference_matrix_is_symmetric_with_zero_diagonal() {
        let (v, b, cfg) = tiny_buffer(3);
        let m = interference_matrix(&v, &b, &cfg).unwrap();
        for i in 0..m.bins {
            assert_eq!(m.matrix[i][i], Some(0.0));
            for j in 0..m.bins {
                assert_eq!(m.matrix[i][j], m.matrix[j][i]);
                if let Some(d) = m.matrix[i][j] {
                    assert!((0.0..=2.0).contains(&d));
                }
            }
        }
    }

    #[test]
    fn bin_gradient_ignores_order_within_bin() {
        let (v, b, cfg) = tiny_buffer(4);
        let mut bins = timestep_bins(&b, INTERFERENCE_BINS);
        let a = bin_gradients(&v, &b, &cfg, &bins).unwrap();
        bins.iter_mut().for_each(|bin| bin.reverse());
        let r = bin_gradients(&v, &b, &cfg, &bins).unwrap();
        for (x, y) in a.iter().zip(&r) {
            let (x, y) = (x.as_ref().unwrap(), y.as_ref().unwrap());
            let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(x.iter().zip(y).all(|(p, q)| (p - q).abs() <= 1e-12 * scale.max(1.0)));
        }
    }

    #[test]
    fn svg_outputs_are_well_formed() {
        let h = svg_heatmap(&[vec![Some(0.0), None], vec![Some(1.0), Some(0.5)]], &["a".into(), "b".into()], &["c".into(), "d".into()], "t<", "x", "y");
        assert!(h.starts_with("<svg") && h.trim_end().ends_with("</svg>") && h.contains("t&lt;"));
        let c = aggregate_curves(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let l = svg_line_plot(&[("zeroes".into(), c)], "curves", "update", "reward");
        assert!(l.contains("polyline") && l.contains("zeroes"));
    }

    proptest! {
        #[test]
        fn curves_ignore_trace_order(traces in prop::collection::vec(prop::collection::vec(-10.0..10.0f64, 4), 1..6), rot in 0usize..6) {
            let a = aggregate_curves(&traces).unwrap();
            let mut t = traces.clone();
            let k = rot % t.len();
            t.rotate_left(k);
            prop_assert_eq!(a, aggregate_curves(&t).unwrap());
        }

        #[test]
        fn distance_matrix_symmetric(vals in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 6), 2..8)) {
            let g: Vec<Option<Vec<f64>>> = vals.into_iter().map(Some).collect();
            let m = distance_matrix(&g);
            for i in 0..g.len() {
                for j in 0..g.len() {
                    prop_assert_eq!(m[i][j], m[j][i]);
                    if let Some(d) = m[i][j] { prop_assert!((0.0..=2.0).contains(&d)); }
                }
                prop_assert!(m[i][i].is_none_or(|d| d == 0.0));
            }
        }

        #[test]
        fn rank_sum_invariant_to_monotone_maps(x in prop::collection::vec(-5.0..5.0f64, 1..6), y in prop::collection::vec(-5.0..5.0f64, 1..6)) {
            let p = rank_sum_less(&x, &y);
            let f = |v: &f64| v.exp();
            let p2 = rank_sum_less(&x.iter().map(f).collect::<Vec<_>>(), &y.iter().map(f).collect::<Vec<_>>());
            prop_assert!((p - p2).abs() < 1e-12);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&p));
        }
    }
}
