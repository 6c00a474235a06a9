//! Evaluation: reward gaps against demonstrators, Gaussian KDE over agent
//! positions, KDE-based KL divergence and density-grid export.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{rollout, total_return, InteractionBatch, MarkovGame, Policy};
use crate::particle::ParticleGame;

pub const BANDWIDTH_FLOOR: f64 = 0.01;
pub const GRID_RESOLUTION: usize = 101;
pub const GRID_MARGIN: f64 = 0.1;
pub const KL_FLOOR: f64 = 1e-12;
pub const EVAL_EPISODES: usize = 100;
pub const EVAL_HORIZON: usize = 50;

/// One recorded agent position.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionSample {
    pub agent: usize,
    pub x: f64,
    pub y: f64,
    pub episode: usize,
    pub step: usize,
}

/// Positions of movable agents at every recorded step.
pub fn positions_from_batch(game: &ParticleGame, batch: &InteractionBatch) -> Vec<PositionSample> {
    let mut out = Vec::new();
    for (e, ep) in batch.episodes.iter().enumerate() {
        for (t, step) in ep.steps.iter().enumerate() {
            for (agent, [x, y]) in game.movable_positions(&step.state) {
                out.push(PositionSample {
                    agent,
                    x,
                    y,
                    episode: e,
                    step: t,
                });
            }
        }
    }
    out
}

/// Per-group demonstrator return statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStat {
    pub name: String,
    pub agents: Vec<usize>,
    pub mean: f64,
    pub std: f64,
}

/// Mean and standard deviation of each group's summed per-episode return.
pub fn group_stats(batch: &InteractionBatch, groups: &[(String, Vec<usize>)]) -> Result<Vec<GroupStat>> {
    if batch.episodes.is_empty() {
        return Err(Error::Empty("batch has no episodes"));
    }
    Ok(groups
        .iter()
        .map(|(name, agents)| {
            let (mean, std) = mean_std(&group_returns(batch, agents));
            GroupStat {
                name: name.clone(),
                agents: agents.clone(),
                mean,
                std,
            }
        })
        .collect())
}

fn group_returns(batch: &InteractionBatch, agents: &[usize]) -> Vec<f64> {
    batch
        .episodes
        .iter()
        .map(|e| agents.iter().map(|&i| total_return(e, i)).sum())
        .collect()
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Reward gap of one group: mean ± std over episodes of |R_learned − R̄_demo|.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardGap {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

/// Gaps of already-computed learner returns against a demonstrator mean.
pub fn gap_of(name: &str, learned_returns: &[f64], demo_mean: f64) -> Result<RewardGap> {
    if learned_returns.is_empty() {
        return Err(Error::Empty("no learner returns"));
    }
    let gaps: Vec<f64> = learned_returns.iter().map(|r| (r - demo_mean).abs()).collect();
    let (mean, std) = mean_std(&gaps);
    Ok(RewardGap {
        name: name.to_string(),
        mean,
        std,
    })
}

/// Rolls out `policies` and reports each group's gap to the demonstrator mean.
pub fn reward_gap<G: MarkovGame + ?Sized>(
    game: &G,
    policies: &[&dyn Policy],
    demo: &[GroupStat],
    episodes: usize,
    seed: u64,
) -> Result<Vec<RewardGap>> {
    let batch = rollout(game, policies, episodes, seed)?;
    demo.iter()
        .map(|g| gap_of(&g.name, &group_returns(&batch, &g.agents), g.mean))
        .collect()
}

/// How per-dimension kernel bandwidths are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Scott's rule σ·n^(-1/6); zero spread is a fault.
    Scott,
    /// Scott's rule with a lower bound.
    ScottFloored(f64),
    Fixed([f64; 2]),
}

impl Default for Bandwidth {
    fn default() -> Self {
        Bandwidth::ScottFloored(BANDWIDTH_FLOOR)
    }
}

/// Two-dimensional product-Gaussian kernel density estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct Kde {
    points: Vec<[f64; 2]>,
    pub bandwidth: [f64; 2],
}

/// Sample standard deviation, exactly zero when all values coincide.
fn std_dev(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    if v.iter().all(|x| *x == v[0]) {
        return 0.0;
    }
    mean_std(&v).1
}

pub fn kde_fit(points: &[[f64; 2]], mode: Bandwidth) -> Result<Kde> {
    if points.len() < 2 {
        return Err(Error::Empty("kernel density estimation needs at least two samples"));
    }
    if points.iter().any(|p| !(p[0].is_finite() && p[1].is_finite())) {
        return Err(Error::NonFinite("position sample".into()));
    }
    let factor = (points.len() as f64).powf(-1.0 / 6.0);
    let scott = |d: usize| std_dev(points.iter().map(move |p| p[d])) * factor;
    let bandwidth = match mode {
        Bandwidth::Fixed(h) => {
            if !(h[0] > 0.0 && h[1] > 0.0) {
                return Err(Error::Config(format!("bandwidths must be positive, got {h:?}")));
            }
            h
        }
        Bandwidth::Scott => {
            let h = [scott(0), scott(1)];
            if h.iter().any(|&v| v <= 0.0) {
                return Err(Error::Degenerate(format!(
                    "samples have zero spread in a dimension (bandwidth {h:?}); use a bandwidth floor such as {BANDWIDTH_FLOOR}"
                )));
            }
            h
        }
        Bandwidth::ScottFloored(floor) => {
            if !(floor > 0.0) {
                return Err(Error::Config(format!("bandwidth floor must be positive, got {floor}")));
            }
            [scott(0).max(floor), scott(1).max(floor)]
        }
    };
    Ok(Kde {
        points: points.to_vec(),
        bandwidth,
    })
}

impl Kde {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn density(&self, x: f64, y: f64) -> f64 {
        let [hx, hy] = self.bandwidth;
        let norm = 1.0 / (2.0 * std::f64::consts::PI * hx * hy * self.points.len() as f64);
        norm * self
            .points
            .iter()
            .map(|p| (-0.5 * (((x - p[0]) / hx).powi(2) + ((y - p[1]) / hy).powi(2))).exp())
            .sum::<f64>()
    }

    /// Densities at every grid node, `[iy][ix]`, via the separable kernel.
    pub fn evaluate(&self, grid: &GridSpec) -> Vec<Vec<f64>> {
        let (xs, ys) = (grid.xs(), grid.ys());
        let [hx, hy] = self.bandwidth;
        let n = self.points.len();
        let kernel = |axis: &[f64], d: usize, h: f64| {
            Array2::from_shape_fn((axis.len(), n), |(a, k)| {
                let z = (axis[a] - self.points[k][d]) / h;
                (-0.5 * z * z).exp()
            })
        };
        let ky = kernel(&ys, 1, hy);
        let kx = kernel(&xs, 0, hx);
        let norm = 1.0 / (2.0 * std::f64::consts::PI * hx * hy * n as f64);
        let m = ky.dot(&kx.t());
        m.outer_iter().map(|row| row.iter().map(|v| v * norm).collect()).collect()
    }
}

/// Rectangular evaluation grid with `nx` × `ny` nodes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    pub fn new(x: (f64, f64), y: (f64, f64), nx: usize, ny: usize) -> Result<Self> {
        if !(x.0 < x.1 && y.0 < y.1) || nx < 2 || ny < 2 {
            return Err(Error::Config(format!("invalid grid x {x:?} y {y:?} with {nx}x{ny} nodes")));
        }
        Ok(GridSpec {
            x_min: x.0,
            x_max: x.1,
            y_min: y.0,
            y_max: y.1,
            nx,
            ny,
        })
    }

    /// The square arena `[-half, half]²` widened by the standard margin.
    pub fn arena(half_width: f64, resolution: usize) -> Result<Self> {
        let h = half_width * (1.0 + GRID_MARGIN);
        Self::new((-h, h), (-h, h), resolution, resolution)
    }

    pub fn xs(&self) -> Vec<f64> {
        axis(self.x_min, self.x_max, self.nx)
    }

    pub fn ys(&self) -> Vec<f64> {
        axis(self.y_min, self.y_max, self.ny)
    }
}

fn axis(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

fn trapezoid_weights(axis: &[f64]) -> Vec<f64> {
    let n = axis.len();
    (0..n)
        .map(|k| {
            let left = if k > 0 { axis[k] - axis[k - 1] } else { 0.0 };
            let right = if k + 1 < n { axis[k + 1] - axis[k] } else { 0.0 };
            0.5 * (left + right)
        })
        .collect()
}

/// Densities on a grid with their marginals.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityGrid {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// `[iy][ix]`.
    pub density: Vec<Vec<f64>>,
    /// Absent for grids read back from CSV.
    pub bandwidth: Option<[f64; 2]>,
    pub marginal_x: Vec<f64>,
    pub marginal_y: Vec<f64>,
}

impl DensityGrid {
    pub fn from_values(xs: Vec<f64>, ys: Vec<f64>, density: Vec<Vec<f64>>, bandwidth: Option<[f64; 2]>) -> Result<Self> {
        if xs.len() < 2 || ys.len() < 2 {
            return Err(Error::Empty("density grid needs at least 2x2 nodes"));
        }
        if density.len() != ys.len() {
            return Err(Error::Shape {
                context: "density rows",
                expected: ys.len(),
                got: density.len(),
            });
        }
        for row in &density {
            if row.len() != xs.len() {
                return Err(Error::Shape {
                    context: "density columns",
                    expected: xs.len(),
                    got: row.len(),
                });
            }
            if row.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
                return Err(Error::NonFinite("density grid".into()));
            }
        }
        let (wx, wy) = (trapezoid_weights(&xs), trapezoid_weights(&ys));
        let marginal_x = (0..xs.len()).map(|ix| (0..ys.len()).map(|iy| density[iy][ix] * wy[iy]).sum()).collect();
        let marginal_y = density.iter().map(|row| row.iter().zip(&wx).map(|(d, w)| d * w).sum()).collect();
        Ok(DensityGrid {
            xs,
            ys,
            density,
            bandwidth,
            marginal_x,
            marginal_y,
        })
    }

    /// Trapezoid-rule integral of the density.
    pub fn integral(&self) -> f64 {
        self.marginal_y.iter().zip(trapezoid_weights(&self.ys)).map(|(m, w)| m * w).sum()
    }

    pub fn max(&self) -> f64 {
        self.density.iter().flatten().cloned().fold(0.0, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.density.iter().flatten().cloned().fold(f64::INFINITY, f64::min)
    }
}

pub fn density_grid(points: &[[f64; 2]], grid: &GridSpec, mode: Bandwidth) -> Result<DensityGrid> {
    let kde = kde_fit(points, mode)?;
    DensityGrid::from_values(grid.xs(), grid.ys(), kde.evaluate(grid), Some(kde.bandwidth))
}

/// KL(p‖q) between two grids on the same nodes, each renormalized to unit
/// integral, with `q` floored at `KL_FLOOR`.
pub fn grid_kl(p: &DensityGrid, q: &DensityGrid) -> Result<f64> {
    if p.xs != q.xs || p.ys != q.ys {
        return Err(Error::Config("KL grids must share nodes".into()));
    }
    let (zp, zq) = (p.integral(), q.integral());
    if !(zp > 0.0 && zq > 0.0) {
        return Err(Error::Degenerate("density integrates to zero on the grid".into()));
    }
    let (wx, wy) = (trapezoid_weights(&p.xs), trapezoid_weights(&p.ys));
    let mut kl = 0.0;
    for (iy, w_y) in wy.iter().enumerate() {
        for (ix, w_x) in wx.iter().enumerate() {
            let pv = p.density[iy][ix] / zp;
            if pv > 0.0 {
                let qv = (q.density[iy][ix] / zq).max(KL_FLOOR);
                kl += w_x * w_y * pv * (pv / qv).ln();
            }
        }
    }
    Ok(kl)
}

/// KDE-based KL(p‖q) by grid quadrature.
pub fn kl_divergence(p: &[[f64; 2]], q: &[[f64; 2]], grid: &GridSpec, mode: Bandwidth) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::Empty("KL needs nonempty sample sets"));
    }
    grid_kl(&density_grid(p, grid, mode)?, &density_grid(q, grid, mode)?)
}

/// Position KL with the all-agent ("total") and per-agent-averaged ("per") forms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlReport {
    pub total: f64,
    pub per: f64,
    pub per_agent: Vec<(usize, f64)>,
}

fn points_of<'a>(samples: impl IntoIterator<Item = &'a PositionSample>) -> Vec<[f64; 2]> {
    samples.into_iter().map(|s| [s.x, s.y]).collect()
}

fn agents_in(samples: &[PositionSample]) -> Vec<usize> {
    let mut a: Vec<usize> = samples.iter().map(|s| s.agent).collect();
    a.sort_unstable();
    a.dedup();
    a
}

/// KL from generated positions `p` to demonstrated positions `q`.
pub fn kl_report(p: &[PositionSample], q: &[PositionSample], grid: &GridSpec, mode: Bandwidth) -> Result<KlReport> {
    let total = kl_divergence(&points_of(p), &points_of(q), grid, mode)?;
    let agents = agents_in(p);
    if agents != agents_in(q) {
        return Err(Error::Config(format!(
            "sample sets cover different agents: {agents:?} vs {:?}",
            agents_in(q)
        )));
    }
    let per_agent = agents
        .iter()
        .map(|&a| {
            let pa = points_of(p.iter().filter(|s| s.agent == a));
            let qa = points_of(q.iter().filter(|s| s.agent == a));
            kl_divergence(&pa, &qa, grid, mode).map(|kl| (a, kl))
        })
        .collect::<Result<Vec<_>>>()?;
    let per = per_agent.iter().map(|(_, kl)| kl).sum::<f64>() / per_agent.len() as f64;
    Ok(KlReport { total, per, per_agent })
}

/// Writes all-agent and per-agent density grids as CSV and SVG into `dir`.
pub fn export_density(
    samples: &[PositionSample],
    grid: &GridSpec,
    mode: Bandwidth,
    dir: &Path,
) -> Result<Vec<(String, DensityGrid)>> {
    if samples.is_empty() {
        return Err(Error::Empty("no position samples to export"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut sets = vec![("all".to_string(), points_of(samples))];
    for a in agents_in(samples) {
        sets.push((format!("agent{a}"), points_of(samples.iter().filter(|s| s.agent == a))));
    }
    let mut out = Vec::new();
    for (name, points) in sets {
        let g = density_grid(&points, grid, mode)?;
        write_file(&dir.join(format!("density_{name}.csv")), &density_csv(&g))?;
        write_file(&dir.join(format!("density_{name}.svg")), &density_svg(&g, &name))?;
        out.push((name, g));
    }
    Ok(out)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// CSV with header `x,y,density`, rows ordered by y then x, floats round-trip exact.
pub fn density_csv(g: &DensityGrid) -> String {
    let mut s = String::from("x,y,density\n");
    for (iy, y) in g.ys.iter().enumerate() {
        for (ix, x) in g.xs.iter().enumerate() {
            let _ = writeln!(s, "{x:?},{y:?},{:?}", g.density[iy][ix]);
        }
    }
    s
}

pub fn read_density_csv(path: &Path) -> Result<DensityGrid> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<(f64, f64, f64)> = Vec::new();
    for (k, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if k == 0 {
            if line.trim() != "x,y,density" {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("expected header x,y,density, got {line:?}"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { line: k + 1, message };
        let v = line
            .split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|e| parse_err(format!("{t:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if v.len() != 3 {
            return Err(parse_err(format!("expected 3 fields, got {}", v.len())));
        }
        rows.push((v[0], v[1], v[2]));
    }
    let mut xs: Vec<f64> = Vec::new();
    for r in &rows {
        if r.1 != rows[0].1 {
            break;
        }
        xs.push(r.0);
    }
    if xs.is_empty() || rows.len() % xs.len() != 0 {
        return Err(Error::Parse {
            line: rows.len() + 1,
            message: "rows do not form a rectangular grid".into(),
        });
    }
    let chunks: Vec<&[(f64, f64, f64)]> = rows.chunks(xs.len()).collect();
    for (iy, c) in chunks.iter().enumerate() {
        if c.iter().zip(&xs).any(|(r, x)| r.0 != *x || r.1 != c[0].1) {
            return Err(Error::Parse {
                line: iy * xs.len() + 2,
                message: "rows do not form a rectangular grid".into(),
            });
        }
    }
    let ys = chunks.iter().map(|c| c[0].1).collect();
    let density = chunks.iter().map(|c| c.iter().map(|r| r.2).collect()).collect();
    DensityGrid::from_values(xs, ys, density, None)
}

const SVG_SIZE: f64 = 600.0;
const SVG_STRIP: f64 = 80.0;
const SVG_PAD: f64 = 10.0;

fn heat_color(t: f64) -> String {
    const STOPS: [[f64; 3]; 5] = [
        [68.0, 1.0, 84.0],
        [59.0, 82.0, 139.0],
        [33.0, 145.0, 140.0],
        [94.0, 201.0, 98.0],
        [253.0, 231.0, 37.0],
    ];
    let t = t.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let k = (t.floor() as usize).min(STOPS.len() - 2);
    let f = t - k as f64;
    let c: Vec<u8> = (0..3)
        .map(|d| (STOPS[k][d] + f * (STOPS[k + 1][d] - STOPS[k][d])).round() as u8)
        .collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

/// 600×600 heatmap with the x marginal above and the y marginal to the right.
pub fn density_svg(g: &DensityGrid, title: &str) -> String {
    let (nx, ny) = (g.xs.len(), g.ys.len());
    let (cw, ch) = (SVG_SIZE / nx as f64, SVG_SIZE / ny as f64);
    let (x0, y0) = (SVG_PAD, SVG_PAD + SVG_STRIP + SVG_PAD);
    let width = x0 + SVG_SIZE + SVG_PAD + SVG_STRIP + SVG_PAD;
    let height = y0 + SVG_SIZE + SVG_PAD;
    let top = g.max().max(f64::MIN_POSITIVE);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(s, "<title>density {title}</title>");
    let _ = writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    for iy in 0..ny {
        for ix in 0..nx {
            let px = x0 + ix as f64 * cw;
            // Larger y is drawn higher.
            let py = y0 + (ny - 1 - iy) as f64 * ch;
            let _ = writeln!(
                s,
                r#"<rect x="{px:.3}" y="{py:.3}" width="{:.3}" height="{:.3}" fill="{}"/>"#,
                cw + 0.05,
                ch + 0.05,
                heat_color(g.density[iy][ix] / top)
            );
        }
    }
    let mx = g.marginal_x.iter().cloned().fold(f64::MIN_POSITIVE, f64::max);
    let pts: Vec<String> = g
        .marginal_x
        .iter()
        .enumerate()
        .map(|(ix, m)| format!("{:.3},{:.3}", x0 + (ix as f64 + 0.5) * cw, SVG_PAD + SVG_STRIP * (1.0 - m / mx)))
        .collect();
    let _ = writeln!(s, r##"<polyline fill="none" stroke="#333" stroke-width="1.5" points="{}"/>"##, pts.join(" "));
    let my = g.marginal_y.iter().cloned().fold(f64::MIN_POSITIVE, f64::max);
    let sx = x0 + SVG_SIZE + SVG_PAD;
    let pts: Vec<String> = g
        .marginal_y
        .iter()
        .enumerate()
        .map(|(iy, m)| format!("{:.3},{:.3}", sx + SVG_STRIP * m / my, y0 + (ny as f64 - iy as f64 - 0.5) * ch))
        .collect();
    let _ = writeln!(s, r##"<polyline fill="none" stroke="#333" stroke-width="1.5" points="{}"/>"##, pts.join(" "));
    s.push_str("</svg>\n");
    s
}
