//! Procedural multi-domain benchmark.
//!
//! Each identity is a smooth colour-blob template; images of an identity
//! are jittered, noisy copies of it. A domain re-colours all its images
//! with a channel-wise affine transform, so domain shift lives in exactly
//! the channel statistics the stylizers manipulate. Identity labels are
//! disjoint across domains. The last domain is the held-out target.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{IMAGE_CHANNELS, IMAGE_HEIGHT, IMAGE_WIDTH};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATA_FILE: &str = "data.bin";
pub const DATA_MAGIC: &[u8; 6] = b"SYNDG1";
pub const SCHEMA_VERSION: u32 = 1;

/// Channel-wise colour transform `clamp(gain · x + bias, 0, 1)` plus the
/// per-pixel noise level of a domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainStyle {
    pub gain: [f32; 3],
    pub bias: [f32; 3],
    pub noise_std: f32,
    /// Per-image spread of the transform: each image scales the gains by
    /// `exp(jitter · z)` with a standard normal `z` drawn per channel.
    #[serde(default)]
    pub jitter: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub source_domains: usize,
    pub identities_per_domain: usize,
    pub images_per_identity: usize,
    /// Maximum per-image translation in pixels.
    pub max_shift: usize,
    pub seed: u64,
    /// Explicit styles, sources first and target last. Generated from the
    /// seed when absent.
    pub styles: Option<Vec<DomainStyle>>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            source_domains: 3,
            identities_per_domain: 20,
            images_per_identity: 20,
            max_shift: 2,
            seed: 0,
            styles: None,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.source_domains == 0 || self.identities_per_domain == 0 || self.images_per_identity == 0 {
            return Err(Error::config("dataset needs at least one source domain, identity and image"));
        }
        if let Some(styles) = &self.styles {
            if styles.len() != self.source_domains + 1 {
                return Err(Error::config(format!(
                    "{} styles given for {} source domains plus a target",
                    styles.len(),
                    self.source_domains
                )));
            }
            if styles.iter().any(|s| !(s.noise_std >= 0.0) || !(s.jitter >= 0.0)) {
                return Err(Error::config("noise_std and jitter must be >= 0"));
            }
        }
        Ok(())
    }

    /// Styles in effect: explicit ones or those derived from the seed.
    pub fn resolved_styles(&self) -> Vec<DomainStyle> {
        self.styles.clone().unwrap_or_else(|| default_styles(self.source_domains, self.seed))
    }
}

/// Per-image style spread of the default target. One shared transform
/// barely moves within-domain retrieval, so the target's images also
/// differ in style from one another.
pub const TARGET_JITTER: f32 = 0.1;

/// Source styles are drawn around the identity transform with distinct
/// colour casts and a single transform per domain. The target is darker,
/// lower in contrast, noisier and varies per image, which puts it outside
/// the sources' convex hull.
pub fn default_styles(sources: usize, seed: u64) -> Vec<DomainStyle> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5354_594c_4553);
    let mut styles: Vec<DomainStyle> = Vec::new();
    let mut attempts = 0;
    while styles.len() < sources {
        attempts += 1;
        let candidate = DomainStyle {
            gain: std::array::from_fn(|_| rng.random_range(0.8..1.2)),
            bias: std::array::from_fn(|_| rng.random_range(-0.18..0.18)),
            noise_std: rng.random_range(0.02..0.05),
            jitter: 0.0,
        };
        // keep source casts apart so domains are distinguishable
        let separated = styles.iter().all(|s| mean_colour_gap(s, &candidate) > 0.12);
        if separated || attempts > 10_000 {
            styles.push(candidate);
        }
    }
    let min_gain: [f32; 3] = std::array::from_fn(|c| styles.iter().map(|s| s.gain[c]).fold(f32::INFINITY, f32::min));
    styles.push(DomainStyle {
        gain: std::array::from_fn(|c| min_gain[c] - rng.random_range(0.25..0.35)),
        bias: std::array::from_fn(|_| rng.random_range(-0.12..-0.06)),
        noise_std: 0.06,
        jitter: TARGET_JITTER,
    });
    styles
}

/// The colour transform of one image of a domain.
fn image_transform(style: &DomainStyle, rng: &mut impl Rng) -> ([f32; 3], [f32; 3]) {
    if style.jitter == 0.0 {
        return (style.gain, style.bias);
    }
    let gain = std::array::from_fn(|c| {
        let z: f32 = rand_distr::StandardNormal.sample(rng);
        style.gain[c] * (style.jitter * z).exp()
    });
    (gain, style.bias)
}

fn mean_colour_gap(a: &DomainStyle, b: &DomainStyle) -> f32 {
    (0..3)
        .map(|c| ((a.gain[c] - b.gain[c]) * 0.5 + a.bias[c] - b.bias[c]).abs())
        .fold(0.0, f32::max)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Domain {
    pub name: String,
    pub style: DomainStyle,
    /// Global identity ids, indexed by local label.
    pub identity_ids: Vec<u32>,
    /// `[N, 3, H, W]`
    pub images: Tensor<f32>,
    /// Local label (index into `identity_ids`) of each image.
    pub labels: Vec<usize>,
    by_identity: Vec<Vec<usize>>,
}

impl Domain {
    fn new(name: String, style: DomainStyle, identity_ids: Vec<u32>, images: Tensor<f32>, labels: Vec<usize>) -> Self {
        let mut by_identity = vec![Vec::new(); identity_ids.len()];
        for (i, &l) in labels.iter().enumerate() {
            by_identity[l].push(i);
        }
        Domain { name, style, identity_ids, images, labels, by_identity }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_identities(&self) -> usize {
        self.identity_ids.len()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = IMAGE_CHANNELS * IMAGE_HEIGHT * IMAGE_WIDTH;
        &self.images.data()[i * per..(i + 1) * per]
    }

    /// Image indices of local identity `label`.
    pub fn images_of(&self, label: usize) -> &[usize] {
        &self.by_identity[label]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub domains: Vec<Domain>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    schema_version: u32,
    domains: Vec<ManifestDomain>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestDomain {
    name: String,
    identity_ids: Vec<u32>,
    image_count: usize,
    style_params: DomainStyle,
}

impl Dataset {
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let styles = spec.resolved_styles();
        let n_domains = spec.source_domains + 1;
        let mut domains = Vec::with_capacity(n_domains);
        for (d, style) in styles.into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(d as u64 + 1);
            let noise = Normal::new(0.0f32, style.noise_std.max(0.0)).expect("finite std");
            let per = IMAGE_CHANNELS * IMAGE_HEIGHT * IMAGE_WIDTH;
            let n = spec.identities_per_domain * spec.images_per_identity;
            let mut data = Vec::with_capacity(n * per);
            let mut labels = Vec::with_capacity(n);
            for id in 0..spec.identities_per_domain {
                let template = identity_template(&mut rng);
                for _ in 0..spec.images_per_identity {
                    let s = spec.max_shift as i64;
                    let dy = if s > 0 { rng.random_range(-s..=s) } else { 0 };
                    let dx = if s > 0 { rng.random_range(-s..=s) } else { 0 };
                    let (gain, bias) = image_transform(&style, &mut rng);
                    for c in 0..IMAGE_CHANNELS {
                        for y in 0..IMAGE_HEIGHT {
                            for x in 0..IMAGE_WIDTH {
                                let sy = (y as i64 - dy).clamp(0, IMAGE_HEIGHT as i64 - 1) as usize;
                                let sx = (x as i64 - dx).clamp(0, IMAGE_WIDTH as i64 - 1) as usize;
                                let mut v = template[(c * IMAGE_HEIGHT + sy) * IMAGE_WIDTH + sx];
                                if style.noise_std > 0.0 {
                                    v += noise.sample(&mut rng);
                                }
                                data.push((gain[c] * v + bias[c]).clamp(0.0, 1.0));
                            }
                        }
                    }
                    labels.push(id);
                }
            }
            let first_id = (d * spec.identities_per_domain) as u32;
            let ids = (0..spec.identities_per_domain as u32).map(|i| first_id + i).collect();
            let name = if d == spec.source_domains { "target".to_string() } else { format!("source{d}") };
            let images = Tensor::new(&[n, IMAGE_CHANNELS, IMAGE_HEIGHT, IMAGE_WIDTH], data)?;
            domains.push(Domain::new(name, style, ids, images, labels));
        }
        Ok(Dataset { domains })
    }

    pub fn sources(&self) -> &[Domain] {
        &self.domains[..self.domains.len() - 1]
    }

    pub fn target(&self) -> &Domain {
        self.domains.last().expect("dataset has a target domain")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = Manifest {
            schema_version: SCHEMA_VERSION,
            domains: self
                .domains
                .iter()
                .map(|d| ManifestDomain {
                    name: d.name.clone(),
                    identity_ids: d.identity_ids.clone(),
                    image_count: d.len(),
                    style_params: d.style.clone(),
                })
                .collect(),
        };
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;

        let mut w = BufWriter::new(fs::File::create(dir.join(DATA_FILE))?);
        w.write_all(DATA_MAGIC)?;
        let total: usize = self.domains.iter().map(Domain::len).sum();
        for v in [total, IMAGE_CHANNELS, IMAGE_HEIGHT, IMAGE_WIDTH] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for (d, domain) in self.domains.iter().enumerate() {
            for i in 0..domain.len() {
                w.write_all(&(d as u32).to_le_bytes())?;
                w.write_all(&domain.identity_ids[domain.labels[i]].to_le_bytes())?;
                for v in domain.image(i) {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(Error::Format(format!("unsupported dataset schema {}", manifest.schema_version)));
        }
        if manifest.domains.len() < 2 {
            return Err(Error::Format("dataset needs at least one source and a target domain".into()));
        }
        let mut r = BufReader::new(fs::File::open(dir.join(DATA_FILE))?);
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != DATA_MAGIC {
            return Err(Error::Format("bad dataset magic".into()));
        }
        let count = read_u32(&mut r)? as usize;
        let dims = [read_u32(&mut r)? as usize, read_u32(&mut r)? as usize, read_u32(&mut r)? as usize];
        if dims != [IMAGE_CHANNELS, IMAGE_HEIGHT, IMAGE_WIDTH] {
            return Err(Error::Format(format!("unsupported image geometry {dims:?}")));
        }
        let per = dims.iter().product::<usize>();
        let mut images: Vec<Vec<f32>> = vec![Vec::new(); manifest.domains.len()];
        let mut labels: Vec<Vec<usize>> = vec![Vec::new(); manifest.domains.len()];
        let mut buf = vec![0u8; per * 4];
        for _ in 0..count {
            let d = read_u32(&mut r)? as usize;
            let id = read_u32(&mut r)?;
            let md = manifest
                .domains
                .get(d)
                .ok_or_else(|| Error::Format(format!("image references unknown domain {d}")))?;
            let label = md
                .identity_ids
                .iter()
                .position(|&x| x == id)
                .ok_or_else(|| Error::Format(format!("identity {id} not listed for domain {}", md.name)))?;
            r.read_exact(&mut buf)?;
            images[d].extend(buf.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])));
            labels[d].push(label);
        }
        let mut domains = Vec::new();
        for ((md, data), labels) in manifest.domains.into_iter().zip(images).zip(labels) {
            if labels.len() != md.image_count {
                return Err(Error::Format(format!(
                    "domain {} lists {} images, data has {}",
                    md.name,
                    md.image_count,
                    labels.len()
                )));
            }
            let n = labels.len();
            let images = if n == 0 {
                return Err(Error::Format(format!("domain {} has no images", md.name)));
            } else {
                Tensor::new(&[n, IMAGE_CHANNELS, IMAGE_HEIGHT, IMAGE_WIDTH], data)?
            };
            domains.push(Domain::new(md.name, md.style_params, md.identity_ids, images, labels));
        }
        let all_ids: Vec<u32> = domains.iter().flat_map(|d| d.identity_ids.iter().copied()).collect();
        let mut sorted = all_ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != all_ids.len() {
            return Err(Error::Format("identity ids overlap across domains".into()));
        }
        Ok(Dataset { domains })
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Per-channel pixel std of every identity template.
const TEMPLATE_STD: f32 = 0.15;

/// Mid-grey canvas with an upper and a lower garment colour plus a few
/// Gaussian blobs. Each channel is standardized to mean 0.5 and a fixed
/// spread, so identities differ in layout and in how the channels co-vary,
/// while per-channel statistics are left to the domain.
fn identity_template(rng: &mut impl Rng) -> Vec<f32> {
    let (h, w) = (IMAGE_HEIGHT, IMAGE_WIDTH);
    let mut t = vec![0.5f32; IMAGE_CHANNELS * h * w];
    let upper: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.3..0.3));
    let lower: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.3..0.3));
    let split = rng.random_range(13.0..19.0f32);
    let blobs: Vec<(f32, f32, f32, [f32; 3])> = (0..rng.random_range(2..=4))
        .map(|_| {
            (
                rng.random_range(0.0..h as f32),
                rng.random_range(0.0..w as f32),
                rng.random_range(1.5..4.0),
                std::array::from_fn(|_| rng.random_range(-0.35..0.35)),
            )
        })
        .collect();
    for y in 0..h {
        // soft garment boundary
        let mix = 1.0 / (1.0 + (-(y as f32 - split)).exp());
        for x in 0..w {
            let body = ((x as f32 - (w as f32 - 1.0) / 2.0).abs() < w as f32 * 0.35) as u8 as f32;
            for c in 0..IMAGE_CHANNELS {
                let mut v = 0.5 + body * ((1.0 - mix) * upper[c] + mix * lower[c]);
                for &(cy, cx, r, col) in &blobs {
                    let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                    v += col[c] * (-d2 / (2.0 * r * r)).exp();
                }
                t[(c * h + y) * w + x] = v;
            }
        }
    }
    let n = (h * w) as f32;
    for plane in t.chunks_exact_mut(h * w) {
        let mean = plane.iter().sum::<f32>() / n;
        let std = (plane.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / n).sqrt().max(1e-6);
        plane.iter_mut().for_each(|v| *v = 0.5 + (*v - mean) * TEMPLATE_STD / std);
    }
    t
}

/// `P × K` images of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainBatch {
    /// `[P·K, 3, H, W]`
    pub images: Tensor<f32>,
    /// Local labels within the domain.
    pub labels: Vec<usize>,
    pub domain: usize,
}

/// Crop padding used by the random-crop augmentation.
pub const CROP_PADDING: usize = 2;

/// Draws `p` identities without replacement and `k` images of each
/// (without replacement when the identity has at least `k`). With
/// `augment`, every image is randomly flipped and crop-jittered.
pub fn sample_batch(
    domain: &Domain,
    domain_index: usize,
    p: usize,
    k: usize,
    augment: bool,
    rng: &mut impl Rng,
) -> Result<DomainBatch> {
    if p == 0 || k == 0 {
        return Err(Error::config("P and K must be positive"));
    }
    if p > domain.num_identities() {
        return Err(Error::config(format!(
            "P = {p} exceeds the {} identities of domain {}",
            domain.num_identities(),
            domain.name
        )));
    }
    let per = IMAGE_CHANNELS * IMAGE_HEIGHT * IMAGE_WIDTH;
    let mut data = Vec::with_capacity(p * k * per);
    let mut labels = Vec::with_capacity(p * k);
    for label in index::sample(rng, domain.num_identities(), p) {
        let pool = domain.images_of(label);
        if pool.is_empty() {
            return Err(Error::config(format!("identity {label} of domain {} has no images", domain.name)));
        }
        let picks: Vec<usize> = if pool.len() >= k {
            index::sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect()
        } else {
            (0..k).map(|_| pool[rng.random_range(0..pool.len())]).collect()
        };
        for i in picks {
            let img = domain.image(i);
            if augment {
                data.extend(augment_image(img, rng));
            } else {
                data.extend_from_slice(img);
            }
            labels.push(label);
        }
    }
    let images = Tensor::new(&[p * k, IMAGE_CHANNELS, IMAGE_HEIGHT, IMAGE_WIDTH], data)?;
    Ok(DomainBatch { images, labels, domain: domain_index })
}

/// Random horizontal flip, then a random crop from the zero-padded image.
pub fn augment_image(img: &[f32], rng: &mut impl Rng) -> Vec<f32> {
    let (h, w) = (IMAGE_HEIGHT, IMAGE_WIDTH);
    let flip = rng.random_bool(0.5);
    let pad = CROP_PADDING as i64;
    let oy = rng.random_range(0..=2 * pad) - pad;
    let ox = rng.random_range(0..=2 * pad) - pad;
    let mut out = vec![0.0f32; img.len()];
    for c in 0..IMAGE_CHANNELS {
        for y in 0..h {
            let sy = y as i64 + oy;
            if sy < 0 || sy >= h as i64 {
                continue;
            }
            for x in 0..w {
                let sx = x as i64 + ox;
                if sx < 0 || sx >= w as i64 {
                    continue;
                }
                let sx = if flip { w as i64 - 1 - sx } else { sx } as usize;
                out[(c * h + y) * w + x] = img[(c * h + sy as usize) * w + sx];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec { identities_per_domain: 6, images_per_identity: 5, ..Default::default() }
    }

    #[test]
    fn generation_is_deterministic_on_disk() {
        let ds = Dataset::generate(&small_spec()).unwrap();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        ds.save(a.path()).unwrap();
        Dataset::generate(&small_spec()).unwrap().save(b.path()).unwrap();
        for f in [MANIFEST_FILE, DATA_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
        assert_eq!(Dataset::load(a.path()).unwrap(), ds);
    }

    #[test]
    fn noiseless_unjittered_identities_are_constant() {
        let mut styles = default_styles(3, 0);
        styles.iter_mut().for_each(|s| {
            s.noise_std = 0.0;
            s.jitter = 0.0;
        });
        let spec = DatasetSpec { max_shift: 0, styles: Some(styles), ..small_spec() };
        let ds = Dataset::generate(&spec).unwrap();
        for d in &ds.domains {
            for label in 0..d.num_identities() {
                let imgs = d.images_of(label);
                assert!(imgs.iter().all(|&i| d.image(i) == d.image(imgs[0])));
            }
        }
    }

    #[test]
    fn labels_are_disjoint_and_pixels_bounded() {
        let ds = Dataset::generate(&small_spec()).unwrap();
        let mut ids: Vec<u32> = ds.domains.iter().flat_map(|d| d.identity_ids.clone()).collect();
        let n = ids.len();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), n);
        assert!(ds.domains.iter().all(|d| d.images.data().iter().all(|v| (0.0..=1.0).contains(v))));
        assert_eq!(ds.target().name, "target");
    }

    #[test]
    fn target_style_is_outside_the_source_hull() {
        for seed in 0..20 {
            let styles = default_styles(3, seed);
            let target = &styles[3];
            // below every source gain on every channel: separated by a hyperplane
            for c in 0..3 {
                assert!(styles[..3].iter().all(|s| s.gain[c] > target.gain[c]));
            }
        }
    }

    #[test]
    fn domains_are_separated_in_channel_means() {
        let ds = Dataset::generate(&DatasetSpec::default()).unwrap();
        let stats: Vec<([f64; 3], [f64; 3])> = ds
            .domains
            .iter()
            .map(|d| {
                let hw = IMAGE_HEIGHT * IMAGE_WIDTH;
                let means: Vec<[f64; 3]> = (0..d.len())
                    .map(|i| {
                        let img = d.image(i);
                        std::array::from_fn(|c| img[c * hw..(c + 1) * hw].iter().map(|&v| v as f64).sum::<f64>() / hw as f64)
                    })
                    .collect();
                let n = means.len() as f64;
                let mu: [f64; 3] = std::array::from_fn(|c| means.iter().map(|m| m[c]).sum::<f64>() / n);
                let sd: [f64; 3] =
                    std::array::from_fn(|c| (means.iter().map(|m| (m[c] - mu[c]).powi(2)).sum::<f64>() / n).sqrt());
                (mu, sd)
            })
            .collect();
        for a in 0..stats.len() {
            for b in a + 1..stats.len() {
                let ratio = (0..3)
                    .map(|c| (stats[a].0[c] - stats[b].0[c]).abs() / stats[a].1[c].max(stats[b].1[c]))
                    .fold(0.0, f64::max);
                assert!(ratio > 3.0, "domains {a} and {b}: separation ratio {ratio}");
            }
        }
    }

    #[test]
    fn pk_batches_have_the_requested_layout() {
        let ds = Dataset::generate(&DatasetSpec::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut total = 0;
        for (d, dom) in ds.sources().iter().enumerate() {
            let b = sample_batch(dom, d, 16, 4, true, &mut rng).unwrap();
            assert_eq!(b.images.shape(), [64, 3, IMAGE_HEIGHT, IMAGE_WIDTH]);
            let mut ids = b.labels.clone();
            ids.dedup();
            assert_eq!(ids.len(), 16);
            total += b.labels.len();
        }
        assert_eq!(total, 192);
    }

    #[test]
    fn exhaustive_sampling_visits_every_identity_once() {
        let ds = Dataset::generate(&small_spec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = sample_batch(&ds.domains[0], 0, 6, 1, false, &mut rng).unwrap();
        let mut l = b.labels.clone();
        l.sort_unstable();
        assert_eq!(l, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn oversampling_identities_is_a_config_error() {
        let ds = Dataset::generate(&small_spec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(sample_batch(&ds.domains[0], 0, 7, 2, false, &mut rng), Err(Error::Config(_))));
        // K larger than the pool falls back to sampling with replacement
        assert_eq!(sample_batch(&ds.domains[0], 0, 2, 9, false, &mut rng).unwrap().labels.len(), 18);
    }

    #[test]
    fn identity_selection_is_uniform() {
        let ds = Dataset::generate(&DatasetSpec::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut counts = [0usize; 20];
        let n = 10_000;
        for _ in 0..n {
            let b = sample_batch(&ds.domains[1], 1, 16, 1, false, &mut rng).unwrap();
            b.labels.iter().for_each(|&l| counts[l] += 1);
        }
        let expected = n as f64 * 16.0 / 20.0;
        for c in counts {
            assert!((c as f64 - expected).abs() / expected < 0.05);
        }
    }

    #[test]
    fn augmentation_without_offset_or_flip_is_identity_shaped() {
        let ds = Dataset::generate(&small_spec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = ds.domains[0].image(0);
        let out = augment_image(img, &mut rng);
        assert_eq!(out.len(), img.len());
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
