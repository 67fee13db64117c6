//! On-disk snapshot records, the dataset manifest, generation of
//! multi-condition datasets and the stratified 3:1:1 split.
//!
//! Layout of a dataset root:
//!
//! ```text
//! manifest.json
//! records/<id>/meta.json
//! records/<id>/rgb.u8        rows x cols x 3, row-major
//! records/<id>/depth.f32     rows x cols, little-endian f32, metres
//! records/<id>/pathloss.f32  size x size, little-endian f32 holding whole dB
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{normalize_depth, normalize_rgb};
use crate::error::{Error, Result};
use crate::propagate::{pathloss_map, quantize_map_capped, PropagationConfig, QuantizedMap, RxGrid};
use crate::scene::{
    generate_scene, render_depth, render_rgb, sample_trajectory_with_step, ImageKind, Payload, Scenario, SceneSpec,
    SensingImage, UavPose, MIN_SCENE_CELLS,
};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionTag {
    pub scenario: Scenario,
    pub altitude_m: f64,
    pub frequency_hz: f64,
}

impl ConditionTag {
    pub fn new(scenario: Scenario, altitude_m: f64, frequency_hz: f64) -> Self {
        ConditionTag {
            scenario,
            altitude_m,
            frequency_hz,
        }
    }

    /// Stable text key, e.g. `crossroad-50m-28ghz`.
    pub fn key(&self) -> String {
        format!("{}-{}m-{}ghz", self.scenario, self.altitude_m, self.frequency_hz / 1e9)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.frequency_hz > 0.0 && self.frequency_hz.is_finite()) {
            return Err(Error::InvalidCondition(format!("{}: frequency must be positive", self.key())));
        }
        let top = self.scenario.max_building_height();
        if !(self.altitude_m > top && self.altitude_m.is_finite()) {
            return Err(Error::InvalidCondition(format!(
                "{}: altitude must exceed the tallest {} building ({top} m)",
                self.key(),
                self.scenario
            )));
        }
        Ok(())
    }
}

impl std::fmt::Display for ConditionTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.key())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotRecord {
    pub id: String,
    pub rgb: SensingImage,
    pub depth: SensingImage,
    pub pathloss: QuantizedMap,
    pub scenario: Scenario,
    pub altitude_m: f64,
    pub frequency_hz: f64,
    pub pose: UavPose,
    pub seed: u64,
}

impl SnapshotRecord {
    pub fn condition(&self) -> ConditionTag {
        ConditionTag::new(self.scenario, self.altitude_m, self.frequency_hz)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub condition: ConditionTag,
    /// Relative to the dataset root.
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub records: Vec<ManifestEntry>,
    pub split: BTreeMap<String, Split>,
}

impl DatasetManifest {
    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.records
            .iter()
            .filter(|r| self.split.get(&r.id) == Some(&split))
            .map(|r| r.id.as_str())
            .collect()
    }

    pub fn conditions(&self) -> Vec<ConditionTag> {
        let mut out: Vec<ConditionTag> = Vec::new();
        for r in &self.records {
            if !out.contains(&r.condition) {
                out.push(r.condition);
            }
        }
        out
    }

    /// `(train, val, test)` counts per condition key.
    pub fn split_counts(&self) -> BTreeMap<String, (usize, usize, usize)> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            let c: &mut (usize, usize, usize) = out.entry(r.condition.key()).or_default();
            match self.split.get(&r.id) {
                Some(Split::Train) => c.0 += 1,
                Some(Split::Val) => c.1 += 1,
                Some(Split::Test) => c.2 += 1,
                None => {}
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub conditions: Vec<ConditionTag>,
    pub snapshots_per_condition: usize,
    pub image_resolution: usize,
    /// Receivers per side of the pathloss map.
    pub map_size: usize,
    pub cell_size_m: f64,
    /// Distance between consecutive snapshots as a fraction of the scene side.
    pub step_fraction: f64,
    pub propagation: PropagationConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            conditions: vec![
                ConditionTag::new(Scenario::Crossroad, 50.0, 28e9),
                ConditionTag::new(Scenario::Crossroad, 70.0, 28e9),
                ConditionTag::new(Scenario::Crossroad, 70.0, 1.6e9),
                ConditionTag::new(Scenario::Widelane, 200.0, 28e9),
            ],
            snapshots_per_condition: 250,
            image_resolution: 32,
            map_size: 16,
            cell_size_m: 2.0,
            step_fraction: crate::scene::DEFAULT_STEP_FRACTION,
            propagation: PropagationConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conditions.is_empty() {
            return Err(Error::InvalidCondition("no conditions configured".into()));
        }
        for (i, c) in self.conditions.iter().enumerate() {
            c.validate()?;
            if self.conditions[..i].contains(c) {
                return Err(Error::InvalidCondition(format!("{c} listed twice")));
            }
        }
        if self.snapshots_per_condition < 5 {
            return Err(Error::Config(format!(
                "{} snapshots per condition is below the minimum of 5",
                self.snapshots_per_condition
            )));
        }
        if self.image_resolution == 0 || self.map_size == 0 {
            return Err(Error::Config("image resolution and map size must be positive".into()));
        }
        if !(self.cell_size_m > 0.0) || !(self.step_fraction > 0.0 && self.step_fraction < 0.5) {
            return Err(Error::Config("cell size must be positive and step fraction in (0, 0.5)".into()));
        }
        self.propagation.validate()
    }

    /// Scene side in cells for a scenario: wide enough that every footprint
    /// of the route box fits at the scenario's highest altitude.
    pub fn scene_cells(&self, scenario: Scenario) -> usize {
        let z = self
            .conditions
            .iter()
            .filter(|c| c.scenario == scenario)
            .map(|c| c.altitude_m)
            .fold(0.0, f64::max);
        ((4.0 * z / self.cell_size_m).ceil() as usize + 2).max(MIN_SCENE_CELLS)
    }
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn scenario_salt(s: Scenario) -> u64 {
    match s {
        Scenario::Crossroad => 1,
        Scenario::Widelane => 2,
    }
}

/// Scene and trajectory depend on the scenario only, so altitude and band
/// sub-datasets share the ground track.
pub fn scene_for(cfg: &DatasetConfig, scenario: Scenario, seed: u64) -> Result<SceneSpec> {
    generate_scene(scenario, mix(seed, scenario_salt(scenario)), cfg.scene_cells(scenario), cfg.cell_size_m)
}

pub fn generate_condition(cfg: &DatasetConfig, tag: &ConditionTag, seed: u64) -> Result<Vec<SnapshotRecord>> {
    tag.validate()?;
    let scene = scene_for(cfg, tag.scenario, seed)?;
    let traj_seed = mix(seed, 0x100 + scenario_salt(tag.scenario));
    let step = scene.extent() * cfg.step_fraction;
    let poses = sample_trajectory_with_step(&scene, tag.altitude_m, cfg.snapshots_per_condition, traj_seed, step)?;
    let prop = cfg.propagation.with_frequency(tag.frequency_hz);
    poses
        .iter()
        .enumerate()
        .map(|(i, pose)| {
            let grid = RxGrid::over_footprint(pose, cfg.map_size);
            let map = pathloss_map(&scene, pose, &grid, &prop)?;
            Ok(SnapshotRecord {
                id: format!("{}-{i:04}", tag.key()),
                rgb: render_rgb(&scene, pose, cfg.image_resolution)?,
                depth: render_depth(&scene, pose, cfg.image_resolution)?,
                pathloss: quantize_map_capped(&map, prop.max_pathloss_db),
                scenario: tag.scenario,
                altitude_m: tag.altitude_m,
                frequency_hz: tag.frequency_hz,
                pose: *pose,
                seed,
            })
        })
        .collect()
}

/// All records of every configured condition, in configuration order.
pub fn generate_records(cfg: &DatasetConfig, seed: u64) -> Result<Vec<SnapshotRecord>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for tag in &cfg.conditions {
        out.extend(generate_condition(cfg, tag, seed)?);
    }
    Ok(out)
}

pub fn manifest_for(records: &[SnapshotRecord]) -> DatasetManifest {
    DatasetManifest {
        format_version: FORMAT_VERSION,
        records: records
            .iter()
            .map(|r| ManifestEntry {
                id: r.id.clone(),
                condition: r.condition(),
                path: format!("records/{}", r.id),
            })
            .collect(),
        split: BTreeMap::new(),
    }
}

/// Writes every record, then the split manifest.
pub fn build_dataset(cfg: &DatasetConfig, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    let records = generate_records(cfg, seed)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for r in &records {
        write_record(r, &out_dir.join("records").join(&r.id))?;
    }
    let manifest = split(&manifest_for(&records), seed)?;
    write_manifest(&manifest, out_dir)?;
    Ok(manifest)
}

/// Per condition: shuffle the sorted ids, then `round(n/5)` validation,
/// `round(n/5)` test and the rest training.
pub fn split(manifest: &DatasetManifest, seed: u64) -> Result<DatasetManifest> {
    if manifest.records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut groups: BTreeMap<String, Vec<&str>> = BTreeMap::new();
    for r in &manifest.records {
        groups.entry(r.condition.key()).or_default().push(&r.id);
    }
    let mut assignment = BTreeMap::new();
    for (key, mut ids) in groups {
        ids.sort_unstable();
        let salt = key.bytes().fold(0u64, |h, b| mix(h, b as u64));
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, salt)));
        let n = ids.len();
        let n_val = (n as f64 / 5.0).round() as usize;
        let n_test = (n as f64 / 5.0).round() as usize;
        for (i, id) in ids.into_iter().enumerate() {
            let s = if i < n_val {
                Split::Val
            } else if i < n_val + n_test {
                Split::Test
            } else {
                Split::Train
            };
            if assignment.insert(id.to_owned(), s).is_some() {
                return Err(Error::InvalidCondition(format!("duplicate record id {id}")));
            }
        }
    }
    Ok(DatasetManifest {
        split: assignment,
        ..manifest.clone()
    })
}

pub fn write_manifest(manifest: &DatasetManifest, root: &Path) -> Result<()> {
    let p = root.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest)?;
    std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let p = root.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::corrupt(&p, e.to_string()))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::corrupt(&p, format!("unsupported format version {}", m.format_version)));
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorMeta {
    dims: Vec<usize>,
    dtype: String,
    crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RecordMeta {
    format_version: u32,
    id: String,
    scenario: Scenario,
    altitude_m: f64,
    frequency_hz: f64,
    pose: UavPose,
    seed: u64,
    rx_grid: RxGrid,
    tensors: BTreeMap<String, TensorMeta>,
}

const RGB_FILE: &str = "rgb.u8";
const DEPTH_FILE: &str = "depth.f32";
const PATHLOSS_FILE: &str = "pathloss.f32";

fn f32_bytes(v: impl Iterator<Item = f32>) -> Vec<u8> {
    v.flat_map(f32::to_le_bytes).collect()
}

pub fn write_record(record: &SnapshotRecord, dir: &Path) -> Result<()> {
    let rgb = record
        .rgb
        .rgb_bytes()
        .ok_or_else(|| Error::ShapeMismatch("rgb image without byte payload".into()))?
        .to_vec();
    let depth = f32_bytes(
        record
            .depth
            .depth_values()
            .ok_or_else(|| Error::ShapeMismatch("depth image without float payload".into()))?
            .iter()
            .copied(),
    );
    let pl = f32_bytes(record.pathloss.values.iter().map(|&v| v as f32));
    let (r, d) = (&record.rgb, &record.depth);
    let m = record.pathloss.size();
    let meta = RecordMeta {
        format_version: FORMAT_VERSION,
        id: record.id.clone(),
        scenario: record.scenario,
        altitude_m: record.altitude_m,
        frequency_hz: record.frequency_hz,
        pose: record.pose,
        seed: record.seed,
        rx_grid: record.pathloss.grid,
        tensors: BTreeMap::from([
            (
                "rgb".to_owned(),
                TensorMeta {
                    dims: vec![r.height, r.width, 3],
                    dtype: "u8".into(),
                    crc32: crc32fast::hash(&rgb),
                },
            ),
            (
                "depth".to_owned(),
                TensorMeta {
                    dims: vec![d.height, d.width],
                    dtype: "f32".into(),
                    crc32: crc32fast::hash(&depth),
                },
            ),
            (
                "pathloss".to_owned(),
                TensorMeta {
                    dims: vec![m, m],
                    dtype: "f32".into(),
                    crc32: crc32fast::hash(&pl),
                },
            ),
        ]),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let put = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    };
    put(RGB_FILE, &rgb)?;
    put(DEPTH_FILE, &depth)?;
    put(PATHLOSS_FILE, &pl)?;
    put("meta.json", serde_json::to_string_pretty(&meta)?.as_bytes())
}

fn read_tensor(dir: &Path, file: &str, meta: &RecordMeta, key: &str, elem: usize) -> Result<Vec<u8>> {
    let p = dir.join(file);
    let t = meta
        .tensors
        .get(key)
        .ok_or_else(|| Error::corrupt(dir, format!("meta.json lacks tensor `{key}`")))?;
    let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
    let expected = t.dims.iter().product::<usize>() * elem;
    if bytes.len() != expected {
        return Err(Error::corrupt(
            &p,
            format!("{} bytes, dims {:?} need {expected}", bytes.len(), t.dims),
        ));
    }
    if crc32fast::hash(&bytes) != t.crc32 {
        return Err(Error::corrupt(&p, "checksum mismatch"));
    }
    Ok(bytes)
}

fn le_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn read_record(dir: &Path) -> Result<SnapshotRecord> {
    let mp = dir.join("meta.json");
    let text = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let meta: RecordMeta = serde_json::from_str(&text).map_err(|e| Error::corrupt(&mp, e.to_string()))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::corrupt(&mp, format!("unsupported format version {}", meta.format_version)));
    }
    let dims = |k: &str| meta.tensors.get(k).map(|t| t.dims.clone()).unwrap_or_default();
    let (rd, dd, pd) = (dims("rgb"), dims("depth"), dims("pathloss"));
    if rd.len() != 3 || rd[2] != 3 || dd.len() != 2 || pd.len() != 2 || pd[0] != pd[1] {
        return Err(Error::corrupt(&mp, "tensor dims have the wrong rank or layout"));
    }
    if rd[..2] != dd[..] {
        return Err(Error::corrupt(&mp, "rgb and depth resolutions differ"));
    }
    if pd[0] != meta.rx_grid.size {
        return Err(Error::corrupt(&mp, "pathloss dims disagree with the receiver grid"));
    }
    let rgb = read_tensor(dir, RGB_FILE, &meta, "rgb", 1)?;
    let depth = le_f32(&read_tensor(dir, DEPTH_FILE, &meta, "depth", 4)?);
    let pl = le_f32(&read_tensor(dir, PATHLOSS_FILE, &meta, "pathloss", 4)?);
    let values = pl
        .iter()
        .map(|&v| {
            if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
                Ok(v as u8)
            } else {
                Err(Error::corrupt(dir.join(PATHLOSS_FILE), format!("{v} is not a whole dB value in [0, 255]")))
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    Ok(SnapshotRecord {
        id: meta.id,
        rgb: SensingImage {
            kind: ImageKind::Rgb,
            width: rd[1],
            height: rd[0],
            channels: 3,
            payload: Payload::U8(rgb),
        },
        depth: SensingImage {
            kind: ImageKind::Depth,
            width: dd[1],
            height: dd[0],
            channels: 1,
            payload: Payload::F32(depth),
        },
        pathloss: QuantizedMap {
            values,
            grid: meta.rx_grid,
            frequency_hz: meta.frequency_hz,
            tx_pose: meta.pose,
        },
        scenario: meta.scenario,
        altitude_m: meta.altitude_m,
        frequency_hz: meta.frequency_hz,
        pose: meta.pose,
        seed: meta.seed,
    })
}

/// Bilinear resampling of a square row-major map with half-pixel centres.
/// Equal sizes return the input unchanged.
pub fn resample_bilinear(src: &[f32], n: usize, m: usize) -> Vec<f32> {
    assert_eq!(src.len(), n * n, "source is not {n} x {n}");
    if n == m {
        return src.to_vec();
    }
    let coord = |i: usize| {
        let u = ((i as f64 + 0.5) * n as f64 / m as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = u.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, u - lo as f64)
    };
    let mut out = Vec::with_capacity(m * m);
    for i in 0..m {
        let (y0, y1, fy) = coord(i);
        for j in 0..m {
            let (x0, x1, fx) = coord(j);
            let at = |y: usize, x: usize| src[y * n + x] as f64;
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            out.push((top * (1.0 - fy) + bot * fy) as f32);
        }
    }
    out
}

/// One training example, ready for batching.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub condition: ConditionTag,
    /// `3 x r x r` in `[0, 1]`.
    pub rgb: Array3<f32>,
    /// `1 x r x r` in `[0, 1]`.
    pub depth: Array3<f32>,
    /// Row-major `p x p` pathloss in dB, resampled to the model output.
    pub target_db: Vec<f32>,
}

pub fn sample_from_record(record: &SnapshotRecord, depth_scale_m: f64, out_side: usize) -> Result<Sample> {
    let m = record.pathloss.size();
    let raw: Vec<f32> = record.pathloss.values.iter().map(|&v| v as f32).collect();
    Ok(Sample {
        id: record.id.clone(),
        condition: record.condition(),
        rgb: normalize_rgb(&record.rgb)?,
        depth: normalize_depth(&record.depth, depth_scale_m)?,
        target_db: resample_bilinear(&raw, m, out_side),
    })
}

/// Dataset root plus its manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest: read_manifest(root)?,
        })
    }

    /// Reads every record in `split` whose condition passes `keep`, in
    /// manifest order.
    pub fn load(
        &self,
        split: Split,
        keep: impl Fn(&ConditionTag) -> bool,
        depth_scale_m: f64,
        out_side: usize,
    ) -> Result<Vec<Sample>> {
        self.manifest
            .records
            .iter()
            .filter(|r| self.manifest.split.get(&r.id) == Some(&split) && keep(&r.condition))
            .map(|r| sample_from_record(&read_record(&self.root.join(&r.path))?, depth_scale_m, out_side))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn manifest_of(n: usize, conditions: &[ConditionTag]) -> DatasetManifest {
        let mut records = Vec::new();
        for c in conditions {
            for i in 0..n {
                records.push(ManifestEntry {
                    id: format!("{}-{i:05}", c.key()),
                    condition: *c,
                    path: String::new(),
                });
            }
        }
        DatasetManifest {
            format_version: FORMAT_VERSION,
            records,
            split: BTreeMap::new(),
        }
    }

    fn cond() -> ConditionTag {
        ConditionTag::new(Scenario::Crossroad, 50.0, 28e9)
    }

    #[test]
    fn split_examples() {
        let m = split(&manifest_of(10, &[cond()]), 3).unwrap();
        assert_eq!(m.split_counts()[&cond().key()], (6, 2, 2));
        let m = split(&manifest_of(9490, &[cond()]), 3).unwrap();
        assert_eq!(m.split_counts()[&cond().key()], (5694, 1898, 1898));
        assert_eq!(split(&m, 3).unwrap().split, m.split);
        let empty = manifest_of(0, &[]);
        assert!(matches!(split(&empty, 0), Err(Error::EmptyDataset)));
    }

    #[test]
    fn condition_keys_and_validation() {
        assert_eq!(cond().key(), "crossroad-50m-28ghz");
        assert_eq!(ConditionTag::new(Scenario::Crossroad, 70.0, 1.6e9).key(), "crossroad-70m-1.6ghz");
        assert!(ConditionTag::new(Scenario::Widelane, 100.0, 28e9).validate().is_err());
        assert!(ConditionTag::new(Scenario::Crossroad, 50.0, 0.0).validate().is_err());
        let mut cfg = DatasetConfig::default();
        cfg.conditions.push(cond());
        assert!(matches!(cfg.validate(), Err(Error::InvalidCondition(_))));
    }

    #[test]
    fn resample_identity_and_constants() {
        let src: Vec<f32> = (0..16).map(|v| v as f32).collect();
        assert_eq!(resample_bilinear(&src, 4, 4), src);
        let flat = vec![7.0f32; 25];
        assert!(resample_bilinear(&flat, 5, 8).iter().all(|&v| (v - 7.0).abs() < 1e-6));
        // Halving a 2x2-block image recovers the block values exactly.
        let blocks: Vec<f32> = (0..16).map(|i| ((i / 4) / 2 * 2 + (i % 4) / 2) as f32).collect();
        assert_eq!(resample_bilinear(&blocks, 4, 2), vec![0.0, 1.0, 2.0, 3.0]);
    }

    fn small_cfg() -> DatasetConfig {
        DatasetConfig {
            conditions: vec![cond(), ConditionTag::new(Scenario::Crossroad, 70.0, 28e9)],
            snapshots_per_condition: 5,
            image_resolution: 8,
            map_size: 6,
            ..Default::default()
        }
    }

    #[test]
    fn altitudes_share_the_ground_track() {
        let cfg = small_cfg();
        let a = generate_condition(&cfg, &cfg.conditions[0], 4).unwrap();
        let b = generate_condition(&cfg, &cfg.conditions[1], 4).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert_eq!((p.pose.x, p.pose.y), (q.pose.x, q.pose.y));
            assert_ne!(p.pose.z, q.pose.z);
        }
    }

    #[test]
    fn record_roundtrip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let rec = generate_condition(&cfg, &cfg.conditions[0], 1).unwrap().remove(2);
        let d = dir.path().join("r");
        write_record(&rec, &d).unwrap();
        assert_eq!(read_record(&d).unwrap(), rec);

        let bytes = std::fs::read(d.join(DEPTH_FILE)).unwrap();
        std::fs::write(d.join(DEPTH_FILE), &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(read_record(&d), Err(Error::CorruptRecord { .. })));
        std::fs::write(d.join(DEPTH_FILE), &bytes).unwrap();

        let mut flipped = std::fs::read(d.join(RGB_FILE)).unwrap();
        flipped[0] ^= 1;
        std::fs::write(d.join(RGB_FILE), &flipped).unwrap();
        assert!(matches!(read_record(&d), Err(Error::CorruptRecord { .. })));

        std::fs::remove_file(d.join(RGB_FILE)).unwrap();
        assert!(matches!(read_record(&d), Err(Error::MissingFile(_))));
    }

    #[test]
    fn meta_declaring_larger_dims_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let rec = generate_condition(&cfg, &cfg.conditions[0], 1).unwrap().remove(0);
        let d = dir.path().join("r");
        write_record(&rec, &d).unwrap();
        let meta = std::fs::read_to_string(d.join("meta.json")).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&meta).unwrap();
        v["tensors"]["rgb"]["dims"] = serde_json::json!([16, 16, 3]);
        v["tensors"]["depth"]["dims"] = serde_json::json!([16, 16]);
        std::fs::write(d.join("meta.json"), v.to_string()).unwrap();
        assert!(matches!(read_record(&d), Err(Error::CorruptRecord { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn stratified_split_stays_within_one_record(
            counts in proptest::collection::vec(1usize..60, 1..4),
            seed in any::<u64>(),
        ) {
            let tags = [cond(), ConditionTag::new(Scenario::Crossroad, 70.0, 28e9), ConditionTag::new(Scenario::Widelane, 200.0, 28e9)];
            let mut m = manifest_of(0, &[]);
            for (c, &n) in tags.iter().zip(&counts) {
                m.records.extend(manifest_of(n, &[*c]).records);
            }
            let s = split(&m, seed).unwrap();
            prop_assert_eq!(s.split.len(), m.records.len());
            for (c, &n) in tags.iter().zip(&counts) {
                let (tr, va, te) = s.split_counts()[&c.key()];
                prop_assert_eq!(tr + va + te, n);
                let n = n as f64;
                prop_assert!((tr as f64 - 0.6 * n).abs() <= 1.0);
                prop_assert!((va as f64 - 0.2 * n).abs() <= 1.0);
                prop_assert!((te as f64 - 0.2 * n).abs() <= 1.0);
            }
        }

        #[test]
        fn resample_stays_within_source_range(n in 1usize..9, m in 1usize..12, seed in any::<u32>()) {
            let src: Vec<f32> = (0..n * n).map(|i| ((i as u32).wrapping_mul(2654435761) ^ seed) as f32 % 255.0).collect();
            let out = resample_bilinear(&src, n, m);
            let lo = src.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = src.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            prop_assert_eq!(out.len(), m * m);
            prop_assert!(out.iter().all(|&v| v >= lo - 1e-3 && v <= hi + 1e-3));
        }
    }
}
