//! Procedural urban scenes and top-down sensing images.
//!
//! A scene is a square building-height field with a road mask. The camera is
//! orthographic and looks straight down; at altitude `z` it sees a square
//! ground footprint of side `2z` centred under the UAV. Each pixel reports the
//! tallest surface inside its ground square, so the depth image is exactly
//! `z - max height` over the cells the pixel covers.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest accepted scene side, in cells.
pub const MIN_SCENE_CELLS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Crossroad,
    Widelane,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Crossroad => "crossroad",
            Scenario::Widelane => "widelane",
        }
    }

    /// Tallest building the generator can place in this family.
    pub fn max_building_height(self) -> f64 {
        self.family().height_m.1
    }

    fn family(self) -> Family {
        match self {
            Scenario::Crossroad => Family {
                road_width_m: (10.0, 16.0),
                max_road_fraction: 0.15,
                lot_m: 20.0,
                density: 0.65,
                setback_m: (2.0, 5.0),
                height_m: (5.0, 40.0),
                salt: 0x6372_6f73_7372_6f61,
            },
            Scenario::Widelane => Family {
                road_width_m: (30.0, 44.0),
                max_road_fraction: 0.3,
                lot_m: 24.0,
                density: 0.9,
                setback_m: (1.0, 2.5),
                height_m: (20.0, 120.0),
                salt: 0x7769_6465_6c61_6e65,
            },
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "crossroad" => Ok(Scenario::Crossroad),
            "widelane" => Ok(Scenario::Widelane),
            other => Err(Error::InvalidCondition(format!("unknown scenario `{other}`"))),
        }
    }
}

/// Per-family generator parameters.
struct Family {
    road_width_m: (f64, f64),
    /// Upper bound on one road band's width relative to the scene side.
    max_road_fraction: f64,
    lot_m: f64,
    density: f64,
    setback_m: (f64, f64),
    height_m: (f64, f64),
    salt: u64,
}

/// Building-height field plus road mask. Cell `(row, col)` covers
/// `x in [col*cell, (col+1)*cell)`, `y in [row*cell, (row+1)*cell)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub scenario: Scenario,
    pub cell_size: f64,
    pub width: usize,
    pub heights: Vec<f64>,
    pub road_mask: Vec<bool>,
    pub seed: u64,
}

impl SceneSpec {
    /// Side length of the scene in meters.
    pub fn extent(&self) -> f64 {
        self.width as f64 * self.cell_size
    }

    pub fn height(&self, row: usize, col: usize) -> f64 {
        self.heights[row * self.width + col]
    }

    pub fn is_road(&self, row: usize, col: usize) -> bool {
        self.road_mask[row * self.width + col]
    }

    pub fn max_height(&self) -> f64 {
        self.heights.iter().copied().fold(0.0, f64::max)
    }

    pub fn mean_height(&self) -> f64 {
        self.heights.iter().sum::<f64>() / self.heights.len() as f64
    }

    /// Cell containing a ground point, or `None` outside the scene.
    pub fn cell_at(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !(x >= 0.0 && y >= 0.0) {
            return None;
        }
        let col = (x / self.cell_size).floor() as usize;
        let row = (y / self.cell_size).floor() as usize;
        (col < self.width && row < self.width).then_some((row, col))
    }

    /// Surface elevation at a ground point (building top or 0).
    pub fn surface_at(&self, x: f64, y: f64) -> Option<f64> {
        self.cell_at(x, y).map(|(r, c)| self.height(r, c))
    }

    /// Flat scene made entirely of road. Handy for tests and calibration.
    pub fn all_road(width: usize, cell_size: f64) -> Self {
        SceneSpec {
            scenario: Scenario::Crossroad,
            cell_size,
            width,
            heights: vec![0.0; width * width],
            road_mask: vec![true; width * width],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UavPose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

/// Square ground area seen by the camera (and covered by the receiver grid).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Footprint {
    pub x_lo: f64,
    pub y_lo: f64,
    pub side: f64,
}

impl Footprint {
    pub fn of(pose: &UavPose) -> Self {
        Footprint {
            x_lo: pose.x - pose.z,
            y_lo: pose.y - pose.z,
            side: 2.0 * pose.z,
        }
    }

    pub fn x_hi(&self) -> f64 {
        self.x_lo + self.side
    }

    pub fn y_hi(&self) -> f64 {
        self.y_lo + self.side
    }

    /// Lower edge of sub-square `i` when the footprint is split into `n` parts.
    pub fn edge(lo: f64, side: f64, i: usize, n: usize) -> f64 {
        lo + side * i as f64 / n as f64
    }

    /// Ground coordinate of the centre of sub-square `i` of `n`.
    pub fn center(lo: f64, side: f64, i: usize, n: usize) -> f64 {
        lo + side * (i as f64 + 0.5) / n as f64
    }

    pub fn contained_in(&self, scene: &SceneSpec) -> bool {
        let ext = scene.extent();
        self.x_lo >= 0.0 && self.y_lo >= 0.0 && self.x_hi() <= ext && self.y_hi() <= ext
    }

    /// Tallest cell whose square overlaps the footprint with positive area.
    pub fn max_height(&self, scene: &SceneSpec) -> f64 {
        let (c0, c1) = cell_span(self.x_lo, self.x_hi(), scene);
        let (r0, r1) = cell_span(self.y_lo, self.y_hi(), scene);
        let mut m = 0.0f64;
        for r in r0..r1 {
            for c in c0..c1 {
                m = m.max(scene.height(r, c));
            }
        }
        m
    }
}

/// Half-open range of cell indices overlapping `[a, b)` with positive length.
fn cell_span(a: f64, b: f64, scene: &SceneSpec) -> (usize, usize) {
    let lo = (a / scene.cell_size).floor().max(0.0) as usize;
    let hi = ((b / scene.cell_size).ceil().max(0.0) as usize).min(scene.width);
    (lo.min(hi), hi)
}

pub fn generate_scene(
    scenario: Scenario,
    seed: u64,
    width_cells: usize,
    cell_size: f64,
) -> Result<SceneSpec> {
    if width_cells < MIN_SCENE_CELLS {
        return Err(Error::InvalidDimension(format!(
            "scene width {width_cells} cells is below the minimum of {MIN_SCENE_CELLS}"
        )));
    }
    if !(cell_size > 0.0 && cell_size.is_finite()) {
        return Err(Error::InvalidDimension(format!(
            "cell size must be positive, got {cell_size}"
        )));
    }
    let fam = scenario.family();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fam.salt);
    let w = width_cells;
    let ext = w as f64 * cell_size;

    let mut road = vec![false; w * w];
    let mut band = |rng: &mut ChaCha8Rng, horizontal: bool| {
        let width_m = rng
            .random_range(fam.road_width_m.0..fam.road_width_m.1)
            .min(fam.max_road_fraction * ext);
        let width_c = ((width_m / cell_size).round() as usize).max(1);
        let jitter = rng.random_range(-0.1..0.1) * ext;
        let centre = ((0.5 * ext + jitter) / cell_size).round() as isize;
        let start = (centre - width_c as isize / 2).clamp(0, (w - width_c) as isize) as usize;
        for k in start..start + width_c {
            for j in 0..w {
                let idx = if horizontal { k * w + j } else { j * w + k };
                road[idx] = true;
            }
        }
    };
    match scenario {
        Scenario::Crossroad => {
            band(&mut rng, true);
            band(&mut rng, false);
        }
        Scenario::Widelane => {
            let horizontal = rng.random_bool(0.5);
            band(&mut rng, horizontal);
        }
    }

    let mut heights = vec![0.0; w * w];
    let lot = ((fam.lot_m / cell_size).round() as usize).max(3);
    let setback = |rng: &mut ChaCha8Rng| {
        let m = rng.random_range(fam.setback_m.0..fam.setback_m.1);
        (m / cell_size).round() as usize
    };
    for lot_r in (0..w).step_by(lot) {
        for lot_c in (0..w).step_by(lot) {
            // Always draw the same number of variates per lot so the layout of
            // one lot never depends on whether a neighbour was built.
            let build = rng.random_bool(fam.density);
            let h = rng.random_range(fam.height_m.0..fam.height_m.1);
            let (s_top, s_bottom, s_left, s_right) =
                (setback(&mut rng), setback(&mut rng), setback(&mut rng), setback(&mut rng));
            if !build {
                continue;
            }
            let r_end = (lot_r + lot).min(w);
            let c_end = (lot_c + lot).min(w);
            let r0 = lot_r + s_top;
            let c0 = lot_c + s_left;
            let r1 = r_end.saturating_sub(s_bottom).max(r0 + 1).min(r_end);
            let c1 = c_end.saturating_sub(s_right).max(c0 + 1).min(c_end);
            for r in r0.min(r_end)..r1 {
                for c in c0.min(c_end)..c1 {
                    if !road[r * w + c] {
                        heights[r * w + c] = h;
                    }
                }
            }
        }
    }

    Ok(SceneSpec {
        scenario,
        cell_size,
        width: w,
        heights,
        road_mask: road,
        seed,
    })
}

/// Default distance flown between consecutive snapshots, as a fraction of
/// the scene side.
pub const DEFAULT_STEP_FRACTION: f64 = 1.0 / 64.0;

pub fn sample_trajectory(
    scene: &SceneSpec,
    altitude: f64,
    n_snapshots: usize,
    seed: u64,
) -> Result<Vec<UavPose>> {
    let step = scene.extent() * DEFAULT_STEP_FRACTION;
    sample_trajectory_with_step(scene, altitude, n_snapshots, seed, step)
}

/// Piecewise-linear route flown at constant speed. The route lives in the
/// central box `[L/4, 3L/4]^2` and does not depend on `altitude`, so every
/// altitude sees the same ground track. Leg lengths are whole multiples of
/// `step`, which puts every corner on a snapshot and keeps consecutive
/// snapshots exactly `step` apart.
pub fn sample_trajectory_with_step(
    scene: &SceneSpec,
    altitude: f64,
    n_snapshots: usize,
    seed: u64,
    step: f64,
) -> Result<Vec<UavPose>> {
    if n_snapshots == 0 {
        return Err(Error::InvalidDimension("a trajectory needs at least one snapshot".into()));
    }
    if !(step > 0.0) {
        return Err(Error::InvalidDimension(format!("trajectory step must be positive, got {step}")));
    }
    if !(altitude > 0.0) {
        return Err(Error::InvalidDimension(format!("altitude must be positive, got {altitude}")));
    }
    let route = route_xy(scene, n_snapshots, seed, step);
    let poses: Vec<UavPose> = route
        .into_iter()
        .map(|(x, y)| UavPose { x, y, z: altitude })
        .collect();
    for (i, p) in poses.iter().enumerate() {
        check_pose(scene, p).map_err(|e| match e {
            Error::FootprintOutOfBounds(msg) => {
                Error::FootprintOutOfBounds(format!("snapshot {i}: {msg}"))
            }
            other => other,
        })?;
    }
    Ok(poses)
}

fn route_xy(scene: &SceneSpec, n: usize, seed: u64, step: f64) -> Vec<(f64, f64)> {
    let ext = scene.extent();
    let (lo, hi) = (0.25 * ext, 0.75 * ext);
    let inside = |x: f64, y: f64| x >= lo && x <= hi && y >= lo && y <= hi;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7472_616a_6563_746f);
    let mut pos = (rng.random_range(lo..hi), rng.random_range(lo..hi));
    let mut out = Vec::with_capacity(n);
    out.push(pos);
    while out.len() < n {
        let mut heading = rng.random_range(0.0..TAU);
        let mut m: usize = rng.random_range(4..=16);
        let mut tries = 0;
        loop {
            let (dx, dy) = (heading.cos(), heading.sin());
            while m > 0 && !inside(pos.0 + dx * step * m as f64, pos.1 + dy * step * m as f64) {
                m -= 1;
            }
            if m > 0 {
                break;
            }
            tries += 1;
            if tries >= 8 {
                // Head for the box centre; one step always fits there.
                heading = (0.5 * ext - pos.1).atan2(0.5 * ext - pos.0);
                m = 1;
                break;
            }
            heading = rng.random_range(0.0..TAU);
            m = rng.random_range(4..=16);
        }
        let (dx, dy) = (heading.cos(), heading.sin());
        let start = pos;
        for j in 1..=m {
            if out.len() == n {
                break;
            }
            pos = (start.0 + dx * step * j as f64, start.1 + dy * step * j as f64);
            out.push(pos);
        }
    }
    out
}

/// Validates a pose: footprint fully inside the scene and the UAV above every
/// building it sees.
pub fn check_pose(scene: &SceneSpec, pose: &UavPose) -> Result<()> {
    let fp = Footprint::of(pose);
    if !fp.contained_in(scene) {
        return Err(Error::FootprintOutOfBounds(format!(
            "footprint of side {:.1} m at ({:.1}, {:.1}) leaves the {:.1} m scene",
            fp.side,
            pose.x,
            pose.y,
            scene.extent()
        )));
    }
    let top = fp.max_height(scene);
    if !(pose.z > top) {
        return Err(Error::FootprintOutOfBounds(format!(
            "altitude {:.1} m does not clear a {:.1} m building under the footprint",
            pose.z, top
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageKind {
    Rgb,
    Depth,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// Interleaved `rows x cols x 3`.
    U8(Vec<u8>),
    /// `rows x cols`, meters.
    F32(Vec<f32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensingImage {
    pub kind: ImageKind,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub payload: Payload,
}

impl SensingImage {
    pub fn rgb_bytes(&self) -> Option<&[u8]> {
        match &self.payload {
            Payload::U8(v) => Some(v),
            Payload::F32(_) => None,
        }
    }

    pub fn depth_values(&self) -> Option<&[f32]> {
        match &self.payload {
            Payload::F32(v) => Some(v),
            Payload::U8(_) => None,
        }
    }
}

pub const ROAD_GRAY: [u8; 3] = [128, 128, 128];
pub const GROUND_GREEN: [u8; 3] = [92, 128, 76];

/// Palette stops indexed by roof height in meters.
const ROOF_PALETTE: [(f64, [f64; 3]); 4] = [
    (0.0, [200.0, 170.0, 140.0]),
    (40.0, [186.0, 92.0, 72.0]),
    (80.0, [110.0, 120.0, 152.0]),
    (120.0, [214.0, 214.0, 228.0]),
];

fn roof_color(h: f64, seed: u64) -> [u8; 3] {
    let mut base = ROOF_PALETTE[ROOF_PALETTE.len() - 1].1;
    for pair in ROOF_PALETTE.windows(2) {
        let ((h0, c0), (h1, c1)) = (pair[0], pair[1]);
        if h <= h1 {
            let t = ((h - h0) / (h1 - h0)).clamp(0.0, 1.0);
            base = [0, 1, 2].map(|k| c0[k] + t * (c1[k] - c0[k]));
            break;
        }
    }
    // Buildings draw distinct heights, so the height bits identify a building.
    let u = splitmix64(seed ^ h.to_bits()) as f64 / u64::MAX as f64;
    let albedo = 0.88 + 0.24 * u;
    base.map(|c| (c * albedo).round().clamp(1.0, 255.0) as u8)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Per pixel: tallest surface over the pixel's ground square and the road flag
/// at the pixel centre.
fn raster(scene: &SceneSpec, pose: &UavPose, resolution: usize) -> Result<Vec<(f64, bool)>> {
    if resolution == 0 {
        return Err(Error::InvalidDimension("resolution must be positive".into()));
    }
    check_pose(scene, pose)?;
    let fp = Footprint::of(pose);
    let spans = |lo: f64| -> Vec<(usize, usize)> {
        (0..resolution)
            .map(|i| {
                let a = Footprint::edge(lo, fp.side, i, resolution);
                let b = Footprint::edge(lo, fp.side, i + 1, resolution);
                cell_span(a, b, scene)
            })
            .collect()
    };
    let cols = spans(fp.x_lo);
    let rows = spans(fp.y_lo);
    let mut out = Vec::with_capacity(resolution * resolution);
    for (i, &(r0, r1)) in rows.iter().enumerate() {
        let yc = Footprint::center(fp.y_lo, fp.side, i, resolution);
        for (j, &(c0, c1)) in cols.iter().enumerate() {
            let mut top = 0.0f64;
            for r in r0..r1 {
                for c in c0..c1 {
                    top = top.max(scene.height(r, c));
                }
            }
            let xc = Footprint::center(fp.x_lo, fp.side, j, resolution);
            let road = scene
                .cell_at(xc, yc)
                .map(|(r, c)| scene.is_road(r, c))
                .unwrap_or(false);
            out.push((top, road));
        }
    }
    Ok(out)
}

pub fn render_rgb(scene: &SceneSpec, pose: &UavPose, resolution: usize) -> Result<SensingImage> {
    let px = raster(scene, pose, resolution)?;
    let mut bytes = Vec::with_capacity(px.len() * 3);
    for (top, road) in px {
        let c = if top > 0.0 {
            roof_color(top, scene.seed)
        } else if road {
            ROAD_GRAY
        } else {
            GROUND_GREEN
        };
        bytes.extend_from_slice(&c);
    }
    Ok(SensingImage {
        kind: ImageKind::Rgb,
        width: resolution,
        height: resolution,
        channels: 3,
        payload: Payload::U8(bytes),
    })
}

pub fn render_depth(scene: &SceneSpec, pose: &UavPose, resolution: usize) -> Result<SensingImage> {
    let px = raster(scene, pose, resolution)?;
    let depth = px.into_iter().map(|(top, _)| (pose.z - top) as f32).collect();
    Ok(SensingImage {
        kind: ImageKind::Depth,
        width: resolution,
        height: resolution,
        channels: 1,
        payload: Payload::F32(depth),
    })
}
