//! Retrieval metrics and style diagnostics.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, Stage};
use crate::data::Domain;
use crate::error::{Error, Result};
use crate::memory::embed_all;
use crate::stylize::{StyleDistribution, StyleMethod, Stylizer, StylizerSpec};
use crate::tensor::kernels::{channel_mean, channel_std};
use crate::tensor::{Eager, Tensor};

/// Queries and gallery with instance ids; a gallery item sharing the
/// query's instance id is the query itself and is skipped.
#[derive(Clone, Debug)]
pub struct RetrievalSplit {
    /// `[nq, d]`, unit norm.
    pub query: Tensor<f32>,
    pub query_labels: Vec<usize>,
    pub query_instances: Vec<usize>,
    /// `[ng, d]`, unit norm.
    pub gallery: Tensor<f32>,
    pub gallery_labels: Vec<usize>,
    pub gallery_instances: Vec<usize>,
}

impl RetrievalSplit {
    /// Every sample queries all the others.
    pub fn all_vs_all(embeddings: Tensor<f32>, labels: Vec<usize>) -> Self {
        let ids: Vec<usize> = (0..labels.len()).collect();
        RetrievalSplit {
            query: embeddings.clone(),
            query_labels: labels.clone(),
            query_instances: ids.clone(),
            gallery: embeddings,
            gallery_labels: labels,
            gallery_instances: ids,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub rank1: f64,
    /// Queries that contributed to the averages.
    pub queries: usize,
    /// Queries without any relevant gallery item.
    pub excluded_queries: usize,
}

/// Average precision of one ranked relevance list.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut total = 0.0;
    for (r, _) in relevant.iter().enumerate().filter(|(_, &rel)| rel) {
        hits += 1;
        total += hits as f64 / (r + 1) as f64;
    }
    (hits > 0).then(|| total / hits as f64)
}

/// Ranks the gallery by descending cosine similarity (ties by gallery
/// index) for every query.
pub fn evaluate(split: &RetrievalSplit) -> Result<RetrievalMetrics> {
    let (nq, ng) = (split.query_labels.len(), split.gallery_labels.len());
    if split.query.rank() != 2 || split.gallery.rank() != 2 || split.query.shape()[1] != split.gallery.shape()[1] {
        return Err(Error::shape(format!(
            "query {:?} and gallery {:?} embeddings differ",
            split.query.shape(),
            split.gallery.shape()
        )));
    }
    if split.query.shape()[0] != nq || split.query_instances.len() != nq {
        return Err(Error::shape("query labels or instances do not match the embeddings"));
    }
    if split.gallery.shape()[0] != ng || split.gallery_instances.len() != ng {
        return Err(Error::shape("gallery labels or instances do not match the embeddings"));
    }
    let d = split.query.shape()[1];
    let mut sims = vec![0.0f32; nq * ng];
    crate::tensor::gemm(nq, d, ng, split.query.data(), false, split.gallery.data(), true, &mut sims, false);

    let (mut ap_sum, mut top1, mut used, mut excluded) = (0.0, 0usize, 0usize, 0usize);
    let mut order: Vec<usize> = Vec::with_capacity(ng);
    for q in 0..nq {
        let row = &sims[q * ng..(q + 1) * ng];
        order.clear();
        order.extend((0..ng).filter(|&j| split.gallery_instances[j] != split.query_instances[q]));
        // + 0.0 turns -0.0 into 0.0 so signed zeros tie like other equal scores
        order.sort_by(|&a, &b| (row[b] + 0.0).total_cmp(&(row[a] + 0.0)).then(a.cmp(&b)));
        let relevant: Vec<bool> = order.iter().map(|&j| split.gallery_labels[j] == split.query_labels[q]).collect();
        match average_precision(&relevant) {
            Some(ap) => {
                ap_sum += ap;
                top1 += relevant[0] as usize;
                used += 1;
            }
            None => excluded += 1,
        }
    }
    let denom = used.max(1) as f64;
    Ok(RetrievalMetrics { map: ap_sum / denom, rank1: top1 as f64 / denom, queries: used, excluded_queries: excluded })
}

/// All-vs-all retrieval over one domain with inference embeddings.
pub fn evaluate_domain(backbone: &Backbone<f32>, domain: &Domain) -> Result<RetrievalMetrics> {
    let embeddings = embed_all(backbone, &domain.images, 128)?;
    evaluate(&RetrievalSplit::all_vs_all(embeddings, domain.labels.clone()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StyleDiagConfig {
    pub draws: usize,
    /// Draws per method written to the CSV; the summary uses all of them.
    pub csv_draws: usize,
    /// Images sampled (uniformly over source images) into the fixed batch.
    pub batch: usize,
    pub stage: Stage,
    pub rho: f64,
    pub seed: u64,
}

impl Default for StyleDiagConfig {
    fn default() -> Self {
        StyleDiagConfig { draws: 10_000, csv_draws: 10, batch: 64, stage: Stage::AfterStage1, rho: 3.0, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    /// Mean over style dimensions of |Pearson r| between original and
    /// generated values, pooled over draws and samples.
    pub mean_abs_pearson: f64,
    /// Mean over style dimensions of the share of the ISG interval covered
    /// by the generated range.
    pub coverage: f64,
    /// Share of generated values inside the per-dimension min-max box of
    /// the original batch styles.
    pub box_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleSummary {
    pub draws: usize,
    pub batch: usize,
    pub channels: usize,
    pub stage: Stage,
    pub methods: BTreeMap<String, MethodSummary>,
}

#[derive(Default, Clone)]
struct Moments {
    n: f64,
    sx: f64,
    sy: f64,
    sxx: f64,
    syy: f64,
    sxy: f64,
    lo: f64,
    hi: f64,
    inside: usize,
}

impl Moments {
    fn push(&mut self, x: f64, y: f64) {
        if self.n == 0.0 {
            self.lo = y;
            self.hi = y;
        }
        self.n += 1.0;
        self.sx += x;
        self.sy += y;
        self.sxx += x * x;
        self.syy += y * y;
        self.sxy += x * y;
        self.lo = self.lo.min(y);
        self.hi = self.hi.max(y);
    }

    fn pearson(&self) -> f64 {
        let cov = self.sxy - self.sx * self.sy / self.n;
        let vx = self.sxx - self.sx * self.sx / self.n;
        let vy = self.syy - self.sy * self.sy / self.n;
        if vx <= 0.0 || vy <= 0.0 {
            // a constant series carries no linear relation unless both are
            return if vx <= 0.0 && vy <= 0.0 { 1.0 } else { 0.0 };
        }
        cov / (vx * vy).sqrt()
    }
}

/// Accumulates generated styles against the originals for one method.
struct StyleAccumulator {
    dims: Vec<Moments>,
    box_lo: Vec<f64>,
    box_hi: Vec<f64>,
    interval: Vec<(f64, f64)>,
}

impl StyleAccumulator {
    fn new(original: &[Vec<f64>], interval: Vec<(f64, f64)>) -> Self {
        let dims = original[0].len();
        let box_lo = (0..dims).map(|j| original.iter().map(|s| s[j]).fold(f64::INFINITY, f64::min)).collect();
        let box_hi = (0..dims).map(|j| original.iter().map(|s| s[j]).fold(f64::NEG_INFINITY, f64::max)).collect();
        StyleAccumulator { dims: vec![Moments::default(); dims], box_lo, box_hi, interval }
    }

    fn push(&mut self, original: &[f64], generated: &[f64]) {
        for (j, m) in self.dims.iter_mut().enumerate() {
            m.push(original[j], generated[j]);
            // small slack for float rounding of convex combinations
            let slack = 1e-5 * (1.0 + self.box_hi[j].abs().max(self.box_lo[j].abs()));
            if generated[j] >= self.box_lo[j] - slack && generated[j] <= self.box_hi[j] + slack {
                m.inside += 1;
            }
        }
    }

    fn summary(&self) -> MethodSummary {
        let k = self.dims.len() as f64;
        let mean_abs_pearson = self.dims.iter().map(|m| m.pearson().abs()).sum::<f64>() / k;
        let coverage = self
            .dims
            .iter()
            .zip(&self.interval)
            .map(|(m, &(lo, hi))| {
                if hi <= lo {
                    return 1.0;
                }
                ((m.hi.min(hi) - m.lo.max(lo)).max(0.0)) / (hi - lo)
            })
            .sum::<f64>()
            / k;
        let total = self.dims.iter().map(|m| m.n).sum::<f64>();
        let box_fraction = self.dims.iter().map(|m| m.inside as f64).sum::<f64>() / total;
        MethodSummary { mean_abs_pearson, coverage, box_fraction }
    }
}

/// Concatenated `[μ; σ]` rows of a `[B, C]` pair.
fn style_rows(mu: &Tensor<f32>, sigma: &Tensor<f32>) -> Vec<Vec<f64>> {
    (0..mu.shape()[0])
        .map(|b| mu.row(b).iter().chain(sigma.row(b)).map(|&v| v as f64).collect())
        .collect()
}

/// Samples a fixed batch from `domains`, extracts feature styles at
/// `config.stage` and draws `config.draws` styles from every stylizer.
/// Writes the CSV to `csv` and returns the summary.
pub fn style_diagnostics(
    backbone: &Backbone<f32>,
    domains: &[Domain],
    config: &StyleDiagConfig,
    csv: &mut impl Write,
) -> Result<StyleSummary> {
    if config.draws == 0 || config.batch == 0 {
        return Err(Error::config("style diagnostics need at least one draw and one image"));
    }
    let total: usize = domains.iter().map(Domain::len).sum();
    if config.batch > total {
        return Err(Error::config(format!("batch of {} exceeds the {total} available images", config.batch)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut picks = index::sample(&mut rng, total, config.batch).into_vec();
    picks.sort_unstable();
    let first = &domains[0].images;
    let per: usize = first.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(config.batch * per);
    for p in picks {
        let (mut d, mut i) = (0, p);
        while i >= domains[d].len() {
            i -= domains[d].len();
            d += 1;
        }
        data.extend_from_slice(domains[d].image(i));
    }
    let mut shape = first.shape().to_vec();
    shape[0] = config.batch;
    let images = Tensor::new(&shape, data)?;
    let features = backbone.features_at(&mut Eager, &images, config.stage)?;
    let eps = StylizerSpec::default().eps;
    let mu = channel_mean(&features)?;
    let sigma = channel_std(&features, eps as f32)?;
    let c = mu.shape()[1];
    let original = style_rows(&mu, &sigma);

    let (imu, isig) = StyleDistribution::from_stats(&mu, &sigma).intervals(config.rho);
    let interval: Vec<(f64, f64)> = imu.into_iter().chain(isig).collect();

    let mu_cols: Vec<String> = (1..=c).map(|i| format!("mu_{i}")).collect();
    let sigma_cols: Vec<String> = (1..=c).map(|i| format!("sigma_{i}")).collect();
    writeln!(csv, "method,sample,{},{}", mu_cols.join(","), sigma_cols.join(","))?;
    let write_row = |csv: &mut dyn Write, method: &str, sample: usize, row: &[f64]| -> Result<()> {
        let vals: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(csv, "{method},{sample},{}", vals.join(","))?;
        Ok(())
    };
    for (b, row) in original.iter().enumerate() {
        write_row(csv, "original", b, row)?;
    }

    let mut methods = BTreeMap::new();
    let mut identity = StyleAccumulator::new(&original, interval.clone());
    original.iter().for_each(|row| identity.push(row, row));
    methods.insert("original".to_string(), identity.summary());

    for (m, method) in StyleMethod::ALL.iter().enumerate() {
        let spec = StylizerSpec { rho: config.rho, seed: config.seed.wrapping_add(m as u64 + 1), ..StylizerSpec::with_method(*method) };
        let mut stylizer = Stylizer::new(spec)?;
        let mut acc = StyleAccumulator::new(&original, interval.clone());
        for draw in 0..config.draws {
            let style = stylizer.draw(&mu, &sigma);
            let rows = style_rows(&style.beta, &style.gamma);
            for (b, row) in rows.iter().enumerate() {
                acc.push(&original[b], row);
                if draw < config.csv_draws {
                    write_row(csv, method.name(), draw * config.batch + b, row)?;
                }
            }
        }
        methods.insert(method.name().to_string(), acc.summary());
    }
    Ok(StyleSummary { draws: config.draws, batch: config.batch, channels: c, stage: config.stage, methods })
}
