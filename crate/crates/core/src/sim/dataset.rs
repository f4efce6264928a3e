//! Labelled synthetic corpus with known ground-truth physics.
//!
//! Every sample draws its own random stream from `(seed, class, index)`, so
//! samples can be produced in any order (or in parallel) and the corpus is
//! byte-identical for a given `(profiles, n_per_class, seed)`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::render::{render_image, resample_area, GrayImage, RenderConfig};
use super::{simulate, SimParams};
use crate::error::{Error, IoContext, Result};
use crate::grid::GridField;
use crate::seed::derive_seed;

/// Where the seed blobs of a class are placed, in fractions of the half-width
/// measured from the grid centre.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Placement {
    /// No lesion at all.
    Absent,
    /// Uniform over the disc of the given radius.
    Interior { max_radius: f64 },
    /// Uniform over the ring between the two radii.
    Peripheral { min_radius: f64, max_radius: f64 },
    /// Near a fixed point below the centre, with isotropic jitter.
    Inferior { offset: f64, jitter: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassProfile {
    pub name: String,
    pub d_mean: f64,
    pub d_sd: f64,
    pub rho_mean: f64,
    pub rho_sd: f64,
    pub k_mean: f64,
    pub k_sd: f64,
    /// Inclusive range of seed-blob counts.
    pub blobs: [usize; 2],
    pub placement: Placement,
    /// Range of seed-blob widths (mm).
    pub blob_sigma: [f64; 2],
    /// Initial peak density as a fraction of K.
    pub seed_amplitude: f64,
}

impl ClassProfile {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("class `{}`: {what}", self.name)));
        let all_finite = [
            self.d_mean,
            self.d_sd,
            self.rho_mean,
            self.rho_sd,
            self.k_mean,
            self.k_sd,
            self.blob_sigma[0],
            self.blob_sigma[1],
            self.seed_amplitude,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !all_finite {
            return bad("non-finite value");
        }
        if self.d_mean <= 0.0 || self.rho_mean < 0.0 || self.k_mean <= 0.0 {
            return bad("D and K means must be > 0 and rho mean >= 0");
        }
        if self.d_sd < 0.0 || self.rho_sd < 0.0 || self.k_sd < 0.0 {
            return bad("standard deviations must be >= 0");
        }
        if self.blobs[0] > self.blobs[1] {
            return bad("blob count range is reversed");
        }
        if self.blob_sigma[0] <= 0.0 || self.blob_sigma[0] > self.blob_sigma[1] {
            return bad("blob width range must be positive and ordered");
        }
        if !(0.0..=1.0).contains(&self.seed_amplitude) {
            return bad("seed amplitude must lie in [0, 1]");
        }
        Ok(())
    }

    /// The four default classes. Means and spreads of D and rho per tumour
    /// type follow the reported per-class values; K is not reported and
    /// defaults to 1.0 with a 10% standard deviation for every class.
    pub fn defaults() -> Vec<ClassProfile> {
        let tumour = |name: &str, d: (f64, f64), rho: (f64, f64), blobs, placement| ClassProfile {
            name: name.to_string(),
            d_mean: d.0,
            d_sd: d.1,
            rho_mean: rho.0,
            rho_sd: rho.1,
            k_mean: 1.0,
            k_sd: 0.1,
            blobs,
            placement,
            blob_sigma: [2.0, 4.0],
            seed_amplitude: 0.5,
        };
        vec![
            tumour(
                "glioma-like",
                (0.150, 0.025),
                (0.025, 0.004),
                [1, 3],
                Placement::Interior { max_radius: 0.45 },
            ),
            tumour(
                "meningioma-like",
                (0.075, 0.020),
                (0.012, 0.003),
                [1, 1],
                Placement::Peripheral {
                    min_radius: 0.6,
                    max_radius: 0.75,
                },
            ),
            tumour(
                "pituitary-like",
                (0.050, 0.012),
                (0.008, 0.002),
                [1, 1],
                Placement::Inferior {
                    offset: 0.35,
                    jitter: 0.06,
                },
            ),
            tumour("no-tumor", (0.050, 0.012), (0.008, 0.002), [0, 0], Placement::Absent),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    /// Side of the square simulation grid.
    pub grid_size: usize,
    /// Simulation grid spacing (mm).
    pub spacing: f64,
    /// Side of the stored ground-truth density grid (the model's tap grid).
    pub tap_size: usize,
    /// Integration time is drawn uniformly from this range (days).
    pub time_range: [f64; 2],
    /// Upper bound on the simulation time step (days).
    pub max_dt: f64,
    /// Delay between the two stored density snapshots (days).
    pub observation_gap: f64,
    pub render: RenderConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            grid_size: 128,
            spacing: 1.0,
            tap_size: 14,
            time_range: [50.0, 400.0],
            max_dt: 1.0,
            observation_gap: 10.0,
            render: RenderConfig::default(),
        }
    }
}

impl GenConfig {
    /// The default corpus rendered at 56x56.
    pub fn desk() -> Self {
        Self {
            render: RenderConfig {
                output_size: 56,
                ..RenderConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn tap_spacing(&self) -> f64 {
        self.grid_size as f64 * self.spacing / self.tap_size as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// One generated sample, before it is written to disk.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub image: GrayImage,
    pub label: usize,
    pub truth: SimParams,
    /// Density at `sim_time`, resampled to the tap grid.
    pub u_true: GridField,
    /// Density at `sim_time + observed_gap`, resampled to the tap grid.
    pub u_next: GridField,
    pub sim_time: f64,
    pub observed_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub label: usize,
    pub class_name: String,
    pub split: Split,
    pub image: String,
    pub image_sha256: String,
    pub field: String,
    pub field_sha256: String,
    pub sidecar: String,
    pub sidecar_sha256: String,
    pub truth: SimParams,
    pub sim_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub n_per_class: usize,
    pub class_counts: BTreeMap<String, usize>,
    pub split_counts: BTreeMap<Split, usize>,
    pub profiles: Vec<ClassProfile>,
    pub config: GenConfig,
    pub samples: Vec<SampleEntry>,
}

impl DatasetManifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    /// SHA-256 of the serialized manifest.
    pub fn checksum(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(Self::FILE);
        let bytes = fs::read(&path).at(&path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn class_names(&self) -> Vec<String> {
        self.profiles.iter().map(|p| p.name.clone()).collect()
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Serialize, Deserialize)]
struct FieldSidecar {
    shape: [usize; 3],
    spacing: f64,
    snapshot_times: [f64; 2],
    params: SimParams,
}

fn truncated_normal(rng: &mut ChaCha8Rng, mean: f64, sd: f64) -> f64 {
    if sd <= 0.0 {
        return mean;
    }
    let normal = Normal::new(mean, sd).expect("finite spread");
    for _ in 0..1000 {
        let v = normal.sample(rng);
        if v > 0.0 {
            return v;
        }
    }
    mean.abs().max(f64::MIN_POSITIVE)
}

fn blob_center(p: &Placement, rng: &mut ChaCha8Rng, half: f64) -> (f64, f64) {
    let polar = |rng: &mut ChaCha8Rng, r_lo: f64, r_hi: f64| {
        // uniform over the annulus area
        let r = (rng.random_range(r_lo * r_lo..=r_hi * r_hi)).sqrt();
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        (half + r * half * theta.sin(), half + r * half * theta.cos())
    };
    match *p {
        Placement::Absent => (half, half),
        Placement::Interior { max_radius } => polar(rng, 0.0, max_radius),
        Placement::Peripheral { min_radius, max_radius } => polar(rng, min_radius, max_radius),
        Placement::Inferior { offset, jitter } => {
            let (di, dj) = polar(rng, 0.0, jitter);
            (di + offset * half, dj)
        }
    }
}

/// Draws and simulates one sample from `profile`.
pub fn generate_sample(
    profile: &ClassProfile,
    label: usize,
    cfg: &GenConfig,
    stream_seed: u64,
) -> Result<SyntheticSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed);
    let d = truncated_normal(&mut rng, profile.d_mean, profile.d_sd);
    let rho = truncated_normal(&mut rng, profile.rho_mean, profile.rho_sd);
    let k = truncated_normal(&mut rng, profile.k_mean, profile.k_sd);
    let sim_time = rng.random_range(cfg.time_range[0]..=cfg.time_range[1]);

    let n = cfg.grid_size;
    let n_blobs = rng.random_range(profile.blobs[0]..=profile.blobs[1]);
    let half = (n as f64 - 1.0) / 2.0;
    let blobs: Vec<((f64, f64), f64)> = (0..n_blobs)
        .map(|_| {
            let c = blob_center(&profile.placement, &mut rng, half);
            let s = rng.random_range(profile.blob_sigma[0]..=profile.blob_sigma[1]);
            (c, s)
        })
        .collect();
    let amp = profile.seed_amplitude * k;
    let initial = GridField::from_fn(n, n, cfg.spacing, |i, j| {
        let total: f64 = blobs
            .iter()
            .map(|&((ci, cj), s)| {
                let di = (i as f64 - ci) * cfg.spacing;
                let dj = (j as f64 - cj) * cfg.spacing;
                amp * (-(di * di + dj * dj) / (2.0 * s * s)).exp()
            })
            .sum();
        total.min(k)
    })?;

    let cfl = cfg.spacing * cfg.spacing / (4.0 * d);
    let dt_cap = cfg.max_dt.min(0.9 * cfl);
    let steps = (sim_time / dt_cap).ceil().max(1.0) as usize;
    let dt = sim_time / steps as f64;
    let truth = SimParams { d, rho, k, dt, steps };
    let at_time = simulate(&initial, &truth, steps)?.last().field.clone();
    let gap_steps = (cfg.observation_gap / dt).ceil().max(1.0) as usize;
    let later = simulate(
        &at_time,
        &SimParams {
            steps: gap_steps,
            ..truth
        },
        gap_steps,
    )?
    .last()
    .field
    .clone();

    let noise_seed = rng.random::<u64>();
    let image = render_image(&at_time, k, noise_seed, &cfg.render);
    let tap = |f: &GridField| {
        GridField::new(
            cfg.tap_size,
            cfg.tap_size,
            cfg.tap_spacing(),
            resample_area(f.values(), n, n, cfg.tap_size, cfg.tap_size),
        )
    };
    Ok(SyntheticSample {
        image,
        label,
        truth,
        u_true: tap(&at_time)?,
        u_next: tap(&later)?,
        sim_time,
        observed_gap: gap_steps as f64 * dt,
    })
}

const SPLIT_STREAM: u64 = 0x5311_7000;

/// Deterministic stratified 80/10/10 split of `n` items of one class.
fn split_assignment(seed: u64, class: usize, n: usize) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[SPLIT_STREAM, class as u64]));
    order.shuffle(&mut rng);
    let n_train = ((n as f64) * 0.8).round() as usize;
    let n_val = (((n as f64) * 0.1).round() as usize).min(n - n_train);
    let mut out = vec![Split::Test; n];
    for (rank, &idx) in order.iter().enumerate() {
        out[idx] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<String> {
    fs::write(path, bytes).at(path)?;
    Ok(sha256_hex(bytes))
}

fn field_bytes(a: &GridField, b: &GridField) -> Vec<u8> {
    a.values()
        .iter()
        .chain(b.values())
        .flat_map(|v| v.to_le_bytes())
        .collect()
}

/// Generates the corpus into `out_dir`: PNG images, ground-truth density
/// pairs (`f64` little-endian with a JSON sidecar) and `manifest.json`.
/// On failure everything written so far is removed.
pub fn generate_dataset(
    profiles: &[ClassProfile],
    n_per_class: usize,
    seed: u64,
    cfg: &GenConfig,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if n_per_class == 0 {
        return Err(Error::Config("n_per_class must be >= 1".into()));
    }
    if profiles.len() < 2 {
        return Err(Error::Config("need at least two class profiles".into()));
    }
    for p in profiles {
        p.validate()?;
    }
    if cfg.grid_size < 3 || cfg.tap_size < 3 || cfg.render.output_size == 0 {
        return Err(Error::Config("grid, tap and image sizes must be >= 3".into()));
    }
    if !(cfg.spacing > 0.0 && cfg.max_dt > 0.0 && cfg.observation_gap > 0.0)
        || !(cfg.time_range[0] > 0.0 && cfg.time_range[0] <= cfg.time_range[1])
    {
        return Err(Error::Config(
            "spacing, max_dt, gap and time range must be positive".into(),
        ));
    }
    let created_root = !out_dir.exists();
    let result = write_corpus(profiles, n_per_class, seed, cfg, out_dir);
    if result.is_err() {
        // best effort: the original error is what gets reported
        if created_root {
            let _ = fs::remove_dir_all(out_dir);
        } else {
            let _ = fs::remove_dir_all(out_dir.join("images"));
            let _ = fs::remove_dir_all(out_dir.join("fields"));
            let _ = fs::remove_file(out_dir.join(DatasetManifest::FILE));
        }
    }
    result
}

fn write_corpus(
    profiles: &[ClassProfile],
    n_per_class: usize,
    seed: u64,
    cfg: &GenConfig,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let images = out_dir.join("images");
    let fields = out_dir.join("fields");
    fs::create_dir_all(&images).at(&images)?;
    fs::create_dir_all(&fields).at(&fields)?;

    let mut samples = Vec::with_capacity(profiles.len() * n_per_class);
    let mut class_counts = BTreeMap::new();
    let mut split_counts = BTreeMap::new();
    for (label, profile) in profiles.iter().enumerate() {
        let splits = split_assignment(seed, label, n_per_class);
        for (j, &split) in splits.iter().enumerate() {
            let sample = generate_sample(profile, label, cfg, derive_seed(seed, &[label as u64, j as u64]))?;
            let id = format!("{:05}", label * n_per_class + j);
            let image = format!("images/{id}.png");
            let field = format!("fields/{id}.bin");
            let sidecar = format!("fields/{id}.json");
            let image_sha256 = write_file(&out_dir.join(&image), &sample.image.encode_png()?)?;
            let field_sha256 = write_file(&out_dir.join(&field), &field_bytes(&sample.u_true, &sample.u_next))?;
            let side = FieldSidecar {
                shape: [2, cfg.tap_size, cfg.tap_size],
                spacing: cfg.tap_spacing(),
                snapshot_times: [sample.sim_time, sample.sim_time + sample.observed_gap],
                params: sample.truth,
            };
            let sidecar_sha256 = write_file(&out_dir.join(&sidecar), &serde_json::to_vec_pretty(&side)?)?;
            *split_counts.entry(split).or_insert(0) += 1;
            samples.push(SampleEntry {
                id,
                label,
                class_name: profile.name.clone(),
                split,
                image,
                image_sha256,
                field,
                field_sha256,
                sidecar,
                sidecar_sha256,
                truth: sample.truth,
                sim_time: sample.sim_time,
            });
        }
        class_counts.insert(profile.name.clone(), n_per_class);
    }
    let manifest = DatasetManifest {
        seed,
        n_per_class,
        class_counts,
        split_counts,
        profiles: profiles.to_vec(),
        config: cfg.clone(),
        samples,
    };
    let path = out_dir.join(DatasetManifest::FILE);
    fs::write(&path, manifest.to_bytes()?).at(&path)?;
    Ok(manifest)
}

/// A sample read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub entry: SampleEntry,
    pub image: GrayImage,
    pub u_true: GridField,
    pub u_next: GridField,
    pub observed_gap: f64,
}

/// Reads the two density snapshots stored for one sample.
pub fn load_field_pair(dir: &Path, entry: &SampleEntry) -> Result<(GridField, GridField, f64)> {
    let side_path = dir.join(&entry.sidecar);
    let side: FieldSidecar = serde_json::from_slice(&fs::read(&side_path).at(&side_path)?)?;
    let path = dir.join(&entry.field);
    let bytes = fs::read(&path).at(&path)?;
    let [two, h, w] = side.shape;
    if two != 2 || bytes.len() != 2 * h * w * 8 {
        return Err(Error::Format {
            path,
            reason: format!("expected {} bytes for shape {:?}", 2 * h * w * 8, side.shape),
        });
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let a = GridField::new(h, w, side.spacing, vals[..h * w].to_vec())?;
    let b = GridField::new(h, w, side.spacing, vals[h * w..].to_vec())?;
    Ok((a, b, side.snapshot_times[1] - side.snapshot_times[0]))
}

/// A generated corpus loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub samples: Vec<LoadedSample>,
}

impl Dataset {
    /// Loads every sample, verifying each file against its manifest checksum.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(dir)?;
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for entry in &manifest.samples {
            for (rel, sum) in [
                (&entry.image, &entry.image_sha256),
                (&entry.field, &entry.field_sha256),
                (&entry.sidecar, &entry.sidecar_sha256),
            ] {
                let path = dir.join(rel);
                let bytes = fs::read(&path).at(&path)?;
                if &sha256_hex(&bytes) != sum {
                    return Err(Error::Format {
                        path,
                        reason: "checksum mismatch".into(),
                    });
                }
            }
            let image = GrayImage::read_png(&dir.join(&entry.image))?;
            let (u_true, u_next, observed_gap) = load_field_pair(dir, entry)?;
            samples.push(LoadedSample {
                entry: entry.clone(),
                image,
                u_true,
                u_next,
                observed_gap,
            });
        }
        Ok(Self {
            root: dir.to_path_buf(),
            manifest,
            samples,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.manifest.profiles.len()
    }

    pub fn image_size(&self) -> usize {
        self.manifest.config.render.output_size
    }

    pub fn split(&self, split: Split) -> Vec<&LoadedSample> {
        self.samples.iter().filter(|s| s.entry.split == split).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> GenConfig {
        GenConfig {
            grid_size: 48,
            tap_size: 12,
            time_range: [20.0, 60.0],
            render: RenderConfig {
                output_size: 24,
                ..RenderConfig::default()
            },
            ..GenConfig::default()
        }
    }

    #[test]
    fn split_is_80_10_10_and_deterministic() {
        let s = split_assignment(3, 0, 200);
        let count = |k| s.iter().filter(|&&x| x == k).count();
        assert_eq!(
            (count(Split::Train), count(Split::Val), count(Split::Test)),
            (160, 20, 20)
        );
        assert_eq!(s, split_assignment(3, 0, 200));
        assert_ne!(s, split_assignment(4, 0, 200));
        assert_eq!(split_assignment(3, 0, 1), vec![Split::Train]);
    }

    #[test]
    fn no_tumor_fields_are_zero() {
        let profiles = ClassProfile::defaults();
        let s = generate_sample(&profiles[3], 3, &small_cfg(), 42).unwrap();
        assert!(s.u_true.values().iter().all(|&v| v == 0.0));
        assert!(s.u_next.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tumour_fields_stay_in_range_and_grow() {
        let profiles = ClassProfile::defaults();
        for (label, p) in profiles.iter().take(3).enumerate() {
            let s = generate_sample(p, label, &small_cfg(), 7 + label as u64).unwrap();
            assert!(s.u_true.max() > 0.0);
            assert!(s.u_true.min() >= 0.0 && s.u_true.max() <= s.truth.k);
            assert!(s.u_next.sum() >= s.u_true.sum());
            assert!(s.truth.dt <= s.truth.cfl_limit(1.0));
            assert!((s.truth.dt * s.truth.steps as f64 - s.sim_time).abs() < 1e-9);
            assert!(s.image.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn glioma_diffusion_draws_match_profile_mean() {
        let glioma = &ClassProfile::defaults()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 2000;
        let draws: Vec<f64> = (0..n)
            .map(|_| truncated_normal(&mut rng, glioma.d_mean, glioma.d_sd))
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let se = glioma.d_sd / (n as f64).sqrt();
        assert!((mean - 0.150).abs() < 3.0 * se, "{mean}");
    }

    #[test]
    fn generation_is_reproducible_and_loadable() {
        let profiles = ClassProfile::defaults();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = generate_dataset(&profiles, 1, 5, &small_cfg(), a.path()).unwrap();
        let mb = generate_dataset(&profiles, 1, 5, &small_cfg(), b.path()).unwrap();
        assert_eq!(ma.checksum().unwrap(), mb.checksum().unwrap());
        assert_eq!(ma.class_counts.len(), 4);
        assert_eq!(
            fs::read(a.path().join(DatasetManifest::FILE)).unwrap(),
            ma.to_bytes().unwrap()
        );
        let ds = Dataset::load(a.path()).unwrap();
        assert_eq!(ds.samples.len(), 4);
        assert_eq!(ds.samples[0].image.size, 24);
        assert_eq!(ds.samples[0].u_true.height(), 12);
    }

    #[test]
    fn tampered_file_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(&ClassProfile::defaults(), 1, 1, &small_cfg(), dir.path()).unwrap();
        fs::write(dir.path().join(&m.samples[0].field), [0u8; 16]).unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn rejects_zero_samples_and_cleans_up_on_failure() {
        let dir = tempfile::tempdir().unwrap();
        let profiles = ClassProfile::defaults();
        assert!(generate_dataset(&profiles, 0, 1, &small_cfg(), dir.path()).is_err());

        // a regular file where the output directory should be
        let blocker = dir.path().join("blocked");
        fs::write(&blocker, b"x").unwrap();
        let err = generate_dataset(&profiles, 1, 1, &small_cfg(), &blocker.join("out"));
        assert!(matches!(err, Err(Error::Io { .. })));

        let mut bad = profiles.clone();
        bad[0].blob_sigma = [0.0, 0.0];
        assert!(matches!(
            generate_dataset(&bad, 1, 1, &small_cfg(), &dir.path().join("bad")),
            Err(Error::Config(_))
        ));
        assert!(!dir.path().join("bad").exists());

        // a directory squatting on the second sample's field file fails mid-way
        let target = dir.path().join("partial");
        fs::create_dir_all(target.join("fields/00001.bin")).unwrap();
        assert!(generate_dataset(&profiles, 1, 1, &small_cfg(), &target).is_err());
        assert!(!target.join("images").exists());
        assert!(!target.join("fields").exists());
        assert!(!target.join(DatasetManifest::FILE).exists());
    }
}
