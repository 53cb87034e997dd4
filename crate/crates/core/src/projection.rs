//! Two-stage neighbor-graph embedding of classifier latents into the plane,
//! interpolated overlays, and an SVG scatter writer.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::Model;
use crate::text::{encode_title, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LayoutParams {
    pub k: usize,
    /// Low-dimensional similarity curve `1 / (1 + a·d^(2b))`.
    pub a: f64,
    pub b: f64,
    pub negative_samples: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for LayoutParams {
    fn default() -> Self {
        LayoutParams {
            k: 15,
            a: 1.58,
            b: 0.9,
            negative_samples: 5,
            epochs: 200,
            seed: 0,
        }
    }
}

impl LayoutParams {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Param(format!("k = {} must be at least 2", self.k)));
        }
        if !(self.a > 0.0 && self.b > 0.0) {
            return Err(Error::Param("curve parameters a and b must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Param("epochs must be positive".into()));
        }
        Ok(())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// The `k` nearest other points of `query` among `points`, nearest first
/// (ties by lower index). `skip` excludes one index, typically the query's own.
pub fn nearest(points: &[Vec<f64>], query: &[f64], k: usize, skip: Option<usize>) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = points
        .iter()
        .enumerate()
        .filter(|&(j, _)| Some(j) != skip)
        .map(|(j, p)| (j, sq_dist(p, query).sqrt()))
        .collect();
    all.sort_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)));
    all.truncate(k);
    all
}

/// Local connectivity `ρ` and bandwidth `σ` for one node's neighbor
/// distances, with `Σ exp(−max(0, d − ρ)/σ) = log₂ k` solved by bisection.
///
/// When at least `log₂ k` neighbors tie at distance `ρ`, the left side
/// cannot drop to the target for any `σ > 0` and `σ` shrinks toward zero.
pub fn smooth_knn(dists: &[f64]) -> (f64, f64) {
    let target = (dists.len() as f64).log2();
    let rho = dists.iter().copied().fold(f64::INFINITY, f64::min);
    let total = |sigma: f64| -> f64 {
        dists
            .iter()
            .map(|&d| (-(d - rho).max(0.0) / sigma).exp())
            .sum()
    };
    let mut hi = dists.iter().map(|&d| d - rho).fold(0.0, f64::max).max(1.0);
    while total(hi) < target {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    let mut sigma = hi;
    for _ in 0..200 {
        sigma = 0.5 * (lo + hi);
        let v = total(sigma);
        if (v - target).abs() < 1e-12 {
            break;
        }
        if v > target {
            hi = sigma;
        } else {
            lo = sigma;
        }
    }
    (rho, sigma.max(f64::MIN_POSITIVE))
}

/// Neighbor weight on `(0, 1]`; underflow is clamped to the smallest
/// positive value.
pub fn kernel_weight(d: f64, rho: f64, sigma: f64) -> f64 {
    (-(d - rho).max(0.0) / sigma).exp().max(f64::MIN_POSITIVE)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FuzzyGraph {
    pub n: usize,
    pub k: usize,
    /// `k` outgoing `(i, j, w)` per node, nearest first.
    pub directed: Vec<(usize, usize, f64)>,
    /// Fuzzy union `w₁ + w₂ − w₁w₂` over each unordered pair, `i < j`.
    pub edges: Vec<(usize, usize, f64)>,
    pub rho: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl FuzzyGraph {
    /// A graph given directly by symmetric edges.
    pub fn from_edges(n: usize, edges: Vec<(usize, usize, f64)>) -> Result<Self> {
        if let Some(&(i, j, w)) = edges.iter().find(|&&(i, j, w)| i >= n || j >= n || i == j || !(w > 0.0 && w <= 1.0)) {
            return Err(Error::Param(format!("bad edge ({i}, {j}, {w}) for {n} nodes")));
        }
        Ok(FuzzyGraph {
            n,
            k: 0,
            directed: Vec::new(),
            edges,
            rho: Vec::new(),
            sigma: Vec::new(),
        })
    }

    /// `Σ_j w_ij − log₂ k` for node `i` before symmetrization.
    pub fn residual(&self, i: usize) -> f64 {
        let s: f64 = self.directed[i * self.k..(i + 1) * self.k]
            .iter()
            .map(|e| e.2)
            .sum();
        s - (self.k as f64).log2()
    }
}

pub fn fuzzy_knn_graph(points: &[Vec<f64>], k: usize) -> Result<FuzzyGraph> {
    let n = points.len();
    if k < 2 || n <= k {
        return Err(Error::Param(format!("need N > k >= 2, got N = {n}, k = {k}")));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::Param("points differ in dimension".into()));
    }
    let mut directed = Vec::with_capacity(n * k);
    let mut rho = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    for (i, p) in points.iter().enumerate() {
        let nb = nearest(points, p, k, Some(i));
        let dists: Vec<f64> = nb.iter().map(|x| x.1).collect();
        let (r, s) = smooth_knn(&dists);
        directed.extend(nb.iter().map(|&(j, dj)| (i, j, kernel_weight(dj, r, s))));
        rho.push(r);
        sigma.push(s);
    }

    let mut pairs: std::collections::BTreeMap<(usize, usize), (f64, f64)> = Default::default();
    for &(i, j, w) in &directed {
        let e = pairs.entry((i.min(j), i.max(j))).or_insert((0.0, 0.0));
        if i < j {
            e.0 = w;
        } else {
            e.1 = w;
        }
    }
    let edges = pairs
        .into_iter()
        .map(|((i, j), (a, b))| (i, j, a + b - a * b))
        .collect();
    Ok(FuzzyGraph {
        n,
        k,
        directed,
        edges,
        rho,
        sigma,
    })
}

fn clip(v: f64) -> f64 {
    v.clamp(-4.0, 4.0)
}

/// Stochastic layout of the graph's nodes in two dimensions.
///
/// Each epoch visits every edge in both directions. The attractive step is
/// weighted by the edge strength and moves both endpoints; each visit also
/// draws `negative_samples` other nodes that push the head node away. The
/// step size decays linearly from 1 toward 0.
pub fn optimize_layout(graph: &FuzzyGraph, params: &LayoutParams) -> Result<Vec<[f64; 2]>> {
    if graph.n == 0 || graph.edges.is_empty() {
        return Err(Error::Param("layout needs a non-empty graph".into()));
    }
    let (a, b) = (params.a, params.b);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut y: Vec<[f64; 2]> = (0..graph.n)
        .map(|_| [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)])
        .collect();
    let directed: Vec<(usize, usize, f64)> = graph
        .edges
        .iter()
        .flat_map(|&(i, j, w)| [(i, j, w), (j, i, w)])
        .collect();

    for epoch in 0..params.epochs {
        let alpha = 1.0 - epoch as f64 / params.epochs as f64;
        for &(i, j, w) in &directed {
            let step = alpha * w;
            let diff = [y[i][0] - y[j][0], y[i][1] - y[j][1]];
            let d2 = diff[0] * diff[0] + diff[1] * diff[1];
            if d2 > 0.0 {
                let coef = -2.0 * a * b * d2.powf(b - 1.0) / (1.0 + a * d2.powf(b));
                for c in 0..2 {
                    let g = clip(coef * diff[c]);
                    y[i][c] += step * g;
                    y[j][c] -= step * g;
                }
            }
            if graph.n <= 2 {
                continue;
            }
            for _ in 0..params.negative_samples {
                let m = loop {
                    let m = rng.random_range(0..graph.n);
                    if m != i && m != j {
                        break m;
                    }
                };
                let diff = [y[i][0] - y[m][0], y[i][1] - y[m][1]];
                let d2 = diff[0] * diff[0] + diff[1] * diff[1];
                for c in 0..2 {
                    let g = if d2 > 0.0 {
                        let coef = 2.0 * b / ((0.001 + d2) * (1.0 + a * d2.powf(b)));
                        clip(coef * diff[c])
                    } else {
                        4.0
                    };
                    y[i][c] += step * g;
                }
            }
        }
    }
    Ok(y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutPoint {
    pub x: f64,
    pub y: f64,
    /// Section id; for overlays, the section the phrase is drawn against.
    pub label: usize,
    pub is_overlay: bool,
    /// Text shown on hover for overlays.
    pub name: Option<String>,
}

/// A frozen layout together with the latents it was built from.
#[derive(Debug, Clone)]
pub struct Projection {
    pub latents: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub coords: Vec<[f64; 2]>,
    pub params: LayoutParams,
}

impl Projection {
    pub fn fit(latents: Vec<Vec<f64>>, labels: Vec<usize>, params: LayoutParams) -> Result<Self> {
        params.validate()?;
        if latents.len() != labels.len() {
            return Err(Error::Param(format!(
                "{} latents but {} labels",
                latents.len(),
                labels.len()
            )));
        }
        let graph = fuzzy_knn_graph(&latents, params.k)?;
        let coords = optimize_layout(&graph, &params)?;
        Ok(Projection {
            latents,
            labels,
            coords,
            params,
        })
    }

    /// Places a new latent at the kernel-weighted mean of its nearest
    /// training points' coordinates.
    pub fn cast(&self, latent: &[f64]) -> Result<[f64; 2]> {
        if self.coords.is_empty() || self.coords.len() != self.latents.len() {
            return Err(Error::Param("projection has no fitted layout".into()));
        }
        if latent.len() != self.latents[0].len() {
            return Err(Error::Param(format!(
                "latent has width {}, layout was built on {}",
                latent.len(),
                self.latents[0].len()
            )));
        }
        let nb = nearest(&self.latents, latent, self.params.k.min(self.latents.len()), None);
        let dists: Vec<f64> = nb.iter().map(|x| x.1).collect();
        let (rho, sigma) = if dists.len() >= 2 {
            smooth_knn(&dists)
        } else {
            (dists[0], 1.0)
        };
        let mut pos = [0.0; 2];
        let mut total = 0.0;
        for &(j, d) in &nb {
            let w = kernel_weight(d, rho, sigma);
            pos[0] += w * self.coords[j][0];
            pos[1] += w * self.coords[j][1];
            total += w;
        }
        Ok([pos[0] / total, pos[1] / total])
    }

    pub fn points(&self) -> Vec<LayoutPoint> {
        self.coords
            .iter()
            .zip(&self.labels)
            .map(|(c, &label)| LayoutPoint {
                x: c[0],
                y: c[1],
                label,
                is_overlay: false,
                name: None,
            })
            .collect()
    }

    /// Mean per-class layout position, indexed by label.
    pub fn centroids(&self, n_classes: usize) -> Vec<Option<[f64; 2]>> {
        let mut sum = vec![[0.0, 0.0]; n_classes];
        let mut count = vec![0usize; n_classes];
        for (c, &l) in self.coords.iter().zip(&self.labels) {
            sum[l][0] += c[0];
            sum[l][1] += c[1];
            count[l] += 1;
        }
        sum.iter()
            .zip(&count)
            .map(|(s, &n)| (n > 0).then(|| [s[0] / n as f64, s[1] / n as f64]))
            .collect()
    }
}

/// Runs `phrase` through the classifier encoder and casts it onto the layout.
pub fn cast_overlay(
    phrase: &str,
    label: usize,
    model: &Model,
    vocab: &Vocab,
    projection: &Projection,
) -> Result<LayoutPoint> {
    let ids = encode_title(phrase, vocab, model.config.max_seq);
    let latent: Vec<f64> = model.extract_latent(&ids)?.iter().map(|&v| v as f64).collect();
    let [x, y] = projection.cast(&latent)?;
    Ok(LayoutPoint {
        x,
        y,
        label,
        is_overlay: true,
        name: Some(phrase.to_string()),
    })
}

/// Mean fraction of each point's `k` nearest layout neighbors sharing its
/// label.
pub fn knn_label_purity(coords: &[[f64; 2]], labels: &[usize], k: usize) -> f64 {
    let pts: Vec<Vec<f64>> = coords.iter().map(|c| c.to_vec()).collect();
    let total: f64 = pts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let nb = nearest(&pts, p, k, Some(i));
            nb.iter().filter(|&&(j, _)| labels[j] == labels[i]).count() as f64 / nb.len() as f64
        })
        .sum();
    total / pts.len() as f64
}

pub const PALETTE: [&str; 11] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf", "#393b79",
];
pub const OVERLAY_COLOR: &str = "#000000";
const SIZE: f64 = 1000.0;
const MARGIN: f64 = 0.05 * SIZE;
const RADIUS: f64 = 3.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn scaler(values: impl Iterator<Item = f64> + Clone) -> impl Fn(f64) -> f64 {
    let lo = values.clone().fold(f64::INFINITY, f64::min);
    let hi = values.fold(f64::NEG_INFINITY, f64::max);
    move |v| {
        if hi > lo {
            MARGIN + (v - lo) / (hi - lo) * (SIZE - 2.0 * MARGIN)
        } else {
            SIZE / 2.0
        }
    }
}

/// SVG scatter, 1000×1000: class points first, overlays on top in black,
/// legend in the top-right corner. The y axis points up.
pub fn render_svg(points: &[LayoutPoint], class_names: &[String]) -> Result<String> {
    if points.is_empty() {
        return Err(Error::EmptyInput);
    }
    let sx = scaler(points.iter().map(|p| p.x));
    let sy = scaler(points.iter().map(|p| p.y));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r##"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="1000" height="1000" viewBox="0 0 1000 1000">
<rect width="1000" height="1000" fill="#ffffff"/>"##
    );
    let circle = |s: &mut String, p: &LayoutPoint, fill: &str| {
        let (x, y) = (sx(p.x), SIZE - sy(p.y));
        match &p.name {
            Some(n) => {
                let _ = writeln!(
                    s,
                    r#"<circle cx="{x:.3}" cy="{y:.3}" r="{RADIUS}" fill="{fill}"><title>{}</title></circle>"#,
                    escape(n)
                );
            }
            None => {
                let _ = writeln!(s, r#"<circle cx="{x:.3}" cy="{y:.3}" r="{RADIUS}" fill="{fill}"/>"#);
            }
        }
    };
    for p in points.iter().filter(|p| !p.is_overlay) {
        circle(&mut s, p, PALETTE[p.label % PALETTE.len()]);
    }
    for p in points.iter().filter(|p| p.is_overlay) {
        circle(&mut s, p, OVERLAY_COLOR);
    }

    let mut entries: Vec<(String, &str)> = class_names
        .iter()
        .enumerate()
        .map(|(i, n)| (escape(n), PALETTE[i % PALETTE.len()]))
        .collect();
    if points.iter().any(|p| p.is_overlay) {
        entries.push(("overlay".to_string(), OVERLAY_COLOR));
    }
    let _ = writeln!(s, r#"<g font-family="sans-serif" font-size="12">"#);
    for (i, (name, color)) in entries.iter().enumerate() {
        let y = 20.0 + 18.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<circle cx="840" cy="{y}" r="5" fill="{color}"/><text x="852" y="{}">{name}</text>"#,
            y + 4.0
        );
    }
    s.push_str("</g>\n</svg>\n");
    Ok(s)
}

pub fn emit_scatter_svg(points: &[LayoutPoint], class_names: &[String], path: &Path) -> Result<()> {
    write_atomic(path, render_svg(points, class_names)?.as_bytes())
}

/// Latents as `N`, `d` (u32 little-endian) followed by `N·d` f32 values.
pub fn encode_latents(latents: &[Vec<f64>]) -> Result<Vec<u8>> {
    let d = latents.first().map_or(0, Vec::len);
    if latents.iter().any(|l| l.len() != d) {
        return Err(Error::Param("latents differ in width".into()));
    }
    let mut buf = Vec::with_capacity(8 + 4 * latents.len() * d);
    buf.extend_from_slice(&(latents.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for v in latents.iter().flatten() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_latents(bytes: &[u8]) -> Result<Vec<Vec<f64>>> {
    if bytes.len() < 8 {
        return Err(Error::Corrupt("latent file shorter than its header".into()));
    }
    let n = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    let d = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = &bytes[8..];
    if Some(body.len()) != n.checked_mul(d).and_then(|x| x.checked_mul(4)) {
        return Err(Error::Corrupt(format!(
            "header promises {n}x{d} values, body holds {} bytes",
            body.len()
        )));
    }
    let flat: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(if d == 0 {
        vec![Vec::new(); n]
    } else {
        flat.chunks(d).map(<[f64]>::to_vec).collect()
    })
}

pub fn write_latents(path: &Path, latents: &[Vec<f64>]) -> Result<()> {
    write_atomic(path, &encode_latents(latents)?)
}

pub fn read_latents(path: &Path) -> Result<Vec<Vec<f64>>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_latents(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    /// `n` points per class around centers spaced `sep` apart along distinct
    /// axes, unit noise.
    pub(crate) fn clusters(classes: usize, n: usize, dim: usize, sep: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for c in 0..classes {
            for _ in 0..n {
                let mut p: Vec<f64> = (0..dim).map(|_| noise.sample(&mut rng)).collect();
                p[c] += sep;
                pts.push(p);
                labels.push(c);
            }
        }
        (pts, labels)
    }

    #[test]
    fn nearest_neighbor_weight_is_one() {
        let (pts, _) = clusters(2, 20, 5, 6.0, 1);
        let g = fuzzy_knn_graph(&pts, 5).unwrap();
        for i in 0..pts.len() {
            assert_eq!(g.directed[i * 5].2, 1.0);
            assert_eq!(g.directed[i * 5..(i + 1) * 5].len(), 5);
        }
        assert!(g.directed.iter().all(|e| e.2 > 0.0 && e.2 <= 1.0));
        assert!(g.edges.iter().all(|e| e.2 > 0.0 && e.2 <= 1.0 && e.0 < e.1));
    }

    #[test]
    fn bandwidth_solves_its_equation() {
        let (pts, _) = clusters(3, 30, 8, 5.0, 2);
        for k in [3, 10, 15] {
            let g = fuzzy_knn_graph(&pts, k).unwrap();
            for i in 0..pts.len() {
                assert!(g.residual(i).abs() < 1e-5, "k {k} node {i}: {}", g.residual(i));
            }
        }
    }

    #[test]
    fn collinear_points() {
        let pts = vec![vec![0.0], vec![1.0], vec![2.0]];
        let g = fuzzy_knn_graph(&pts, 2).unwrap();
        // Ends: one neighbor at ρ carries weight 1 and the target log₂2 = 1 is
        // met as σ → 0.
        for i in [0, 2] {
            assert!(g.residual(i).abs() < 1e-5);
        }
        // Middle: both neighbors sit at ρ, so the sum is 2 for every σ.
        assert_eq!(g.residual(1), 1.0);
        let w = |i, j| g.edges.iter().find(|e| (e.0, e.1) == (i, j)).unwrap().2;
        assert_eq!(w(0, 1), 1.0);
        assert_eq!(w(1, 2), 1.0);
        assert!(w(0, 2) < 1e-12);
    }

    #[test]
    fn smooth_knn_against_direct_bisection() {
        // Independent solve of Σ exp(−(d−ρ)/σ) = log₂k on a log scale.
        let dists = [0.5, 0.9, 1.1, 1.7, 2.0, 2.2, 3.5, 4.0];
        let (rho, sigma) = smooth_knn(&dists);
        assert_eq!(rho, 0.5);
        let f = |s: f64| dists.iter().map(|d| (-(d - 0.5) / s).exp()).sum::<f64>() - 3.0;
        let (mut lo, mut hi) = (-20.0f64, 5.0f64);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if f(mid.exp()) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        assert!((sigma - lo.exp()).abs() < 1e-8 * sigma.max(1.0));
    }

    #[test]
    fn duplicates_get_mutual_weight_one() {
        let mut pts = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
        pts.extend((0..5).map(|i| vec![3.0 + i as f64, 1.0]));
        let g = fuzzy_knn_graph(&pts, 3).unwrap();
        assert_eq!(g.edges.iter().find(|e| (e.0, e.1) == (0, 1)).unwrap().2, 1.0);
    }

    #[test]
    fn graph_parameter_errors() {
        let pts = vec![vec![0.0]; 3];
        assert!(fuzzy_knn_graph(&pts, 3).is_err());
        assert!(fuzzy_knn_graph(&pts, 1).is_err());
        let g = FuzzyGraph::from_edges(3, vec![]).unwrap();
        assert!(optimize_layout(&g, &LayoutParams::default()).is_err());
        assert!(FuzzyGraph::from_edges(2, vec![(0, 1, 1.5)]).is_err());
    }

    #[test]
    fn connected_pair_collapses() {
        // min_dist 0.1 for a = 1.58, b = 0.9.
        let g = FuzzyGraph::from_edges(2, vec![(0, 1, 1.0)]).unwrap();
        let y = optimize_layout(&g, &LayoutParams::default()).unwrap();
        let d = ((y[0][0] - y[1][0]).powi(2) + (y[0][1] - y[1][1]).powi(2)).sqrt();
        assert!(d < 0.2, "{d}");
    }

    #[test]
    fn layout_is_seeded() {
        let (pts, labels) = clusters(3, 20, 6, 8.0, 3);
        let p = LayoutParams {
            k: 5,
            epochs: 30,
            ..LayoutParams::default()
        };
        let a = Projection::fit(pts.clone(), labels.clone(), p).unwrap();
        let b = Projection::fit(pts.clone(), labels.clone(), p).unwrap();
        assert_eq!(a.coords, b.coords);
        let c = Projection::fit(pts, labels, LayoutParams { seed: 1, ..p }).unwrap();
        assert_ne!(a.coords, c.coords);
    }

    #[test]
    fn clusters_stay_apart() {
        let (pts, labels) = clusters(3, 40, 16, 10.0, 4);
        let p = LayoutParams {
            k: 10,
            epochs: 100,
            ..LayoutParams::default()
        };
        let proj = Projection::fit(pts, labels.clone(), p).unwrap();
        assert!(knn_label_purity(&proj.coords, &labels, 10) >= 0.9);
    }

    #[test]
    fn overlay_is_convex_and_tracks_duplicates() {
        let (pts, labels) = clusters(3, 25, 8, 10.0, 5);
        let p = LayoutParams {
            k: 8,
            epochs: 60,
            ..LayoutParams::default()
        };
        let proj = Projection::fit(pts.clone(), labels, p).unwrap();
        let cents = proj.centroids(3);
        for (i, q) in pts.iter().enumerate().step_by(7) {
            let o = proj.cast(q).unwrap();
            let nb = nearest(&proj.latents, q, 8, None);
            let xs: Vec<f64> = nb.iter().map(|&(j, _)| proj.coords[j][0]).collect();
            let ys: Vec<f64> = nb.iter().map(|&(j, _)| proj.coords[j][1]).collect();
            let within = |v: f64, s: &[f64]| {
                s.iter().cloned().fold(f64::INFINITY, f64::min) - 1e-9 <= v
                    && v <= s.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1e-9
            };
            assert!(within(o[0], &xs) && within(o[1], &ys));
            // A duplicate of a training point lands in that point's cluster.
            let own = proj.labels[i];
            let dist = |c: [f64; 2]| ((o[0] - c[0]).powi(2) + (o[1] - c[1]).powi(2)).sqrt();
            let best = (0..3).min_by(|&a, &b| dist(cents[a].unwrap()).total_cmp(&dist(cents[b].unwrap()))).unwrap();
            assert_eq!(best, own);
        }
        assert!(proj.cast(&[1.0]).is_err());
        let empty = Projection {
            latents: vec![],
            labels: vec![],
            coords: vec![],
            params: p,
        };
        assert!(empty.cast(&[0.0; 8]).is_err());
    }

    fn pt(x: f64, y: f64, label: usize, overlay: bool) -> LayoutPoint {
        LayoutPoint {
            x,
            y,
            label,
            is_overlay: overlay,
            name: overlay.then(|| "a<b".to_string()),
        }
    }

    #[test]
    fn svg_circles_and_order() {
        let pts = vec![pt(0.0, 0.0, 0, false), pt(1.0, 2.0, 1, false), pt(0.5, 0.5, 0, true), pt(2.0, 1.0, 12, false)];
        let names: Vec<String> = ["Politics", "Sports"].iter().map(|s| s.to_string()).collect();
        let svg = render_svg(&pts, &names).unwrap();
        let body = svg.split("<g font-family").next().unwrap();
        assert_eq!(body.matches("<circle").count(), 4);
        let black = body.find("#000000").unwrap();
        assert!(body.rfind(PALETTE[0]).unwrap() < black && body.rfind(PALETTE[1]).unwrap() < black);
        assert!(svg.contains(">Politics<") && svg.contains(">overlay<"));
        assert!(svg.contains("a&lt;b"));
        assert!(svg.contains(r#"cx="50.000" cy="950.000""#));
        assert!(svg.contains(r#"cx="500.000" cy="50.000""#));
        assert!(svg.contains(r#"cx="950.000" cy="500.000""#));
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn svg_single_point_is_centered() {
        let svg = render_svg(&[pt(3.0, -7.0, 0, false)], &[]).unwrap();
        assert!(svg.contains(r#"cx="500.000" cy="500.000""#));
        assert!(render_svg(&[], &[]).is_err());
    }

    #[test]
    fn svg_write_and_unwritable_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plot.svg");
        emit_scatter_svg(&[pt(0.0, 0.0, 0, false)], &["x".into()], &path).unwrap();
        assert!(std::fs::read_to_string(&path).unwrap().starts_with("<?xml"));
        let bad = dir.path().join("missing").join("plot.svg");
        assert!(matches!(emit_scatter_svg(&[pt(0.0, 0.0, 0, false)], &[], &bad), Err(Error::Io { .. })));
    }

    #[test]
    fn latent_file_round_trip() {
        let lat = vec![vec![0.5, -1.25, 3.0], vec![7.0, 0.0, -0.125]];
        let bytes = encode_latents(&lat).unwrap();
        assert_eq!(&bytes[..8], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(decode_latents(&bytes).unwrap(), lat);
        assert!(decode_latents(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_latents(&bytes[..5]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lat.bin");
        write_latents(&p, &lat).unwrap();
        assert_eq!(read_latents(&p).unwrap(), lat);
    }
}
