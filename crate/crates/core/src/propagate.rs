//! Desk-scale propagation oracle: free-space loss plus single knife-edge
//! diffraction over the dominant obstruction, evaluated on a heightfield.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{check_pose, Footprint, SceneSpec, UavPose};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Point3 { x, y, z }
    }

    pub fn distance(&self, other: &Point3) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2) + (self.z - other.z).powi(2))
            .sqrt()
    }
}

impl From<UavPose> for Point3 {
    fn from(p: UavPose) -> Self {
        Point3::new(p.x, p.y, p.z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Diffraction {
    On,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PropagationConfig {
    pub frequency_hz: f64,
    pub rx_height_m: f64,
    pub max_pathloss_db: f64,
    pub diffraction: Diffraction,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        PropagationConfig {
            frequency_hz: 28e9,
            rx_height_m: 1.5,
            max_pathloss_db: 255.0,
            diffraction: Diffraction::On,
        }
    }
}

impl PropagationConfig {
    pub fn with_frequency(&self, frequency_hz: f64) -> Self {
        PropagationConfig {
            frequency_hz,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.frequency_hz > 0.0 && self.frequency_hz.is_finite()) {
            return Err(Error::NonPositiveFrequency(self.frequency_hz));
        }
        if !(self.rx_height_m >= 0.0) {
            return Err(Error::Config(format!("rx height must be >= 0, got {}", self.rx_height_m)));
        }
        if !(self.max_pathloss_db > 0.0 && self.max_pathloss_db <= 255.0) {
            return Err(Error::Config(format!(
                "max pathloss must lie in (0, 255] dB, got {}",
                self.max_pathloss_db
            )));
        }
        Ok(())
    }
}

/// Free-space pathloss in dB.
pub fn fspl_db(distance_m: f64, frequency_hz: f64) -> f64 {
    20.0 * (4.0 * std::f64::consts::PI * distance_m * frequency_hz / SPEED_OF_LIGHT).log10()
}

/// Single knife-edge excess loss for Fresnel-Kirchhoff parameter `nu`.
pub fn knife_edge_loss_db(nu: f64) -> f64 {
    if nu <= -0.78 {
        return 0.0;
    }
    let a = nu - 0.1;
    6.9 + 20.0 * ((a * a + 1.0).sqrt() + a).log10()
}

/// Outcome of walking the segment through the height grid.
#[derive(Debug, Clone, Copy)]
struct PathProfile {
    blocked: bool,
    /// Largest Fresnel parameter over all obstructing cells.
    worst_nu: f64,
}

fn check_in_bounds(scene: &SceneSpec, p: &Point3) -> Result<(usize, usize)> {
    scene.cell_at(p.x, p.y).ok_or(Error::OutOfBounds { x: p.x, y: p.y })
}

/// Visits every cell the horizontal projection of `tx -> rx` passes through,
/// with the parameter interval `[t_in, t_out]` spent inside it.
fn traverse(scene: &SceneSpec, tx: &Point3, rx: &Point3, mut visit: impl FnMut(usize, usize, f64, f64)) {
    let cs = scene.cell_size;
    let (x0, y0) = (tx.x / cs, tx.y / cs);
    let (dx, dy) = ((rx.x - tx.x) / cs, (rx.y - tx.y) / cs);
    let mut col = x0.floor() as isize;
    let mut row = y0.floor() as isize;
    let step_c: isize = if dx > 0.0 { 1 } else { -1 };
    let step_r: isize = if dy > 0.0 { 1 } else { -1 };
    let axis = |p: f64, d: f64, cell: isize| -> (f64, f64) {
        if d == 0.0 {
            (f64::INFINITY, f64::INFINITY)
        } else {
            let next = if d > 0.0 { (cell + 1) as f64 } else { cell as f64 };
            ((next - p) / d, 1.0 / d.abs())
        }
    };
    let (mut t_max_c, dt_c) = axis(x0, dx, col);
    let (mut t_max_r, dt_r) = axis(y0, dy, row);
    let w = scene.width as isize;
    let mut t_in = 0.0;
    loop {
        let t_out = t_max_c.min(t_max_r).min(1.0);
        if (0..w).contains(&row) && (0..w).contains(&col) {
            visit(row as usize, col as usize, t_in, t_out);
        }
        if t_out >= 1.0 {
            break;
        }
        // Exact corner hits advance both axes; the two side cells are only
        // touched at a point.
        if t_max_c <= t_max_r {
            col += step_c;
            if t_max_r == t_max_c {
                row += step_r;
                t_max_r += dt_r;
            }
            t_max_c += dt_c;
        } else {
            row += step_r;
            t_max_r += dt_r;
        }
        t_in = t_out;
    }
}

fn profile(scene: &SceneSpec, tx: &Point3, rx: &Point3, wavelength: f64) -> PathProfile {
    let total = tx.distance(rx);
    let z_at = |t: f64| tx.z + t * (rx.z - tx.z);
    let mut blocked = false;
    let mut worst_nu = f64::NEG_INFINITY;
    traverse(scene, tx, rx, |row, col, t_in, t_out| {
        let h = scene.height(row, col);
        if h > z_at(t_in).min(z_at(t_out)) {
            blocked = true;
            let mut candidates = [t_in, t_out]
                .into_iter()
                .filter(|&t| t > 0.0 && t < 1.0)
                .peekable();
            let mut eval = |t: f64| {
                let clearance = h - z_at(t);
                let nu = clearance * (2.0 / (wavelength * total * t * (1.0 - t))).sqrt();
                worst_nu = worst_nu.max(nu);
            };
            if candidates.peek().is_none() {
                eval(0.5 * (t_in + t_out).clamp(1e-6, 1.0 - 1e-6));
            }
            candidates.for_each(eval);
        }
    });
    PathProfile { blocked, worst_nu }
}

/// True iff the straight segment `tx -> rx` passes through the volume of a
/// building: some traversed cell is taller than the segment inside that cell.
pub fn los_blocked(scene: &SceneSpec, tx: &Point3, rx: &Point3) -> Result<bool> {
    check_in_bounds(scene, tx)?;
    check_in_bounds(scene, rx)?;
    let mut blocked = false;
    let z_at = |t: f64| tx.z + t * (rx.z - tx.z);
    traverse(scene, tx, rx, |row, col, t_in, t_out| {
        blocked |= scene.height(row, col) > z_at(t_in).min(z_at(t_out));
    });
    Ok(blocked)
}

pub fn pathloss_point(scene: &SceneSpec, tx: &Point3, rx: &Point3, cfg: &PropagationConfig) -> Result<f64> {
    check_in_bounds(scene, tx)?;
    check_in_bounds(scene, rx)?;
    if !(cfg.frequency_hz > 0.0) {
        return Err(Error::NonPositiveFrequency(cfg.frequency_hz));
    }
    let d = tx.distance(rx);
    if d == 0.0 {
        return Err(Error::ZeroDistance);
    }
    let free = fspl_db(d, cfg.frequency_hz);
    if cfg.diffraction == Diffraction::Off {
        return Ok(free);
    }
    let wavelength = SPEED_OF_LIGHT / cfg.frequency_hz;
    let p = profile(scene, tx, rx, wavelength);
    Ok(if p.blocked {
        free + knife_edge_loss_db(p.worst_nu)
    } else {
        free
    })
}

/// Square receiver lattice; node `(i, j)` sits at
/// `(origin_x + j*spacing, origin_y + i*spacing)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RxGrid {
    pub origin_x: f64,
    pub origin_y: f64,
    pub spacing: f64,
    pub size: usize,
}

impl RxGrid {
    /// `size x size` nodes at the centres of an even split of the footprint.
    pub fn over_footprint(pose: &UavPose, size: usize) -> Self {
        let fp = Footprint::of(pose);
        RxGrid {
            origin_x: Footprint::center(fp.x_lo, fp.side, 0, size),
            origin_y: Footprint::center(fp.y_lo, fp.side, 0, size),
            spacing: fp.side / size as f64,
            size,
        }
    }

    pub fn node(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.origin_x + j as f64 * self.spacing,
            self.origin_y + i as f64 * self.spacing,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathlossMap {
    /// Row-major `size x size`, dB.
    pub values: Vec<f64>,
    pub grid: RxGrid,
    pub frequency_hz: f64,
    pub tx_pose: UavPose,
}

pub fn pathloss_map(
    scene: &SceneSpec,
    tx_pose: &UavPose,
    grid: &RxGrid,
    cfg: &PropagationConfig,
) -> Result<PathlossMap> {
    cfg.validate()?;
    check_pose(scene, tx_pose)?;
    if grid.size == 0 || !(grid.spacing > 0.0) {
        return Err(Error::InvalidDimension("empty receiver grid".into()));
    }
    let fp = Footprint::of(tx_pose);
    let (lx, ly) = grid.node(0, 0);
    let (hx, hy) = grid.node(grid.size - 1, grid.size - 1);
    let tol = 1e-9 * fp.side;
    if lx < fp.x_lo - tol || ly < fp.y_lo - tol || hx > fp.x_hi() + tol || hy > fp.y_hi() + tol {
        return Err(Error::FootprintMismatch(format!(
            "grid spans ({lx:.2}, {ly:.2})..({hx:.2}, {hy:.2}) outside footprint ({:.2}, {:.2})..({:.2}, {:.2})",
            fp.x_lo,
            fp.y_lo,
            fp.x_hi(),
            fp.y_hi()
        )));
    }
    let tx = Point3::from(*tx_pose);
    let mut values = Vec::with_capacity(grid.size * grid.size);
    for i in 0..grid.size {
        for j in 0..grid.size {
            let (x, y) = grid.node(i, j);
            // Receivers sit on whatever surface is under them.
            let ground = scene.surface_at(x, y).ok_or(Error::OutOfBounds { x, y })?;
            let rx = Point3::new(x, y, ground + cfg.rx_height_m);
            values.push(pathloss_point(scene, &tx, &rx, cfg)?);
        }
    }
    Ok(PathlossMap {
        values,
        grid: *grid,
        frequency_hz: cfg.frequency_hz,
        tx_pose: *tx_pose,
    })
}

/// Pathloss map with integer dB values in `[0, 255]`, one pixel per receiver.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMap {
    pub values: Vec<u8>,
    pub grid: RxGrid,
    pub frequency_hz: f64,
    pub tx_pose: UavPose,
}

impl QuantizedMap {
    pub fn size(&self) -> usize {
        self.grid.size
    }
}

pub fn quantize_db(v: f64, ceiling: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, ceiling.min(255.0)) as u8
}

/// Rounds half-up to whole dB and clamps to `[0, 255]`.
pub fn quantize_map(map: &PathlossMap) -> QuantizedMap {
    quantize_map_capped(map, 255.0)
}

pub fn quantize_map_capped(map: &PathlossMap, ceiling_db: f64) -> QuantizedMap {
    QuantizedMap {
        values: map.values.iter().map(|&v| quantize_db(v, ceiling_db)).collect(),
        grid: map.grid,
        frequency_hz: map.frequency_hz,
        tx_pose: map.tx_pose,
    }
}
