//! Synthetic passive light transport between a hidden plane and a relay
//! surface, plus classical inverse solvers used as oracles.
//!
//! Scene frame: the relay surface is the plane `z = 0` centered on the
//! origin with normal `+z`; the hidden plane is parallel at `z = D`. The
//! camera sits 150 cm from the relay center on the hidden side, tilted
//! about the vertical axis by the condition's view angle.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use nlos_tensor::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::ImageGrid;

/// Exponent of the specular lobe `max(0, cos)^n`.
pub const SPECULAR_EXPONENT: i32 = 50;
/// Camera distance from the relay-surface center.
pub const CAMERA_DISTANCE_CM: f64 = 150.0;
/// Relative amplitude of the per-patch albedo texture on plain walls.
pub const WALL_TEXTURE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AngleId {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
}

impl AngleId {
    pub fn from_index(i: u32) -> Result<Self> {
        match i {
            1 => Ok(Self::One),
            2 => Ok(Self::Two),
            _ => Err(Error::Config(format!("angle id must be 1 or 2, got {i}"))),
        }
    }

    pub fn index(self) -> u32 {
        match self {
            Self::One => 1,
            Self::Two => 2,
        }
    }

    pub fn tilt_deg(self) -> f64 {
        match self {
            Self::One => 0.0,
            Self::Two => 30.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IlluminationKind {
    AmbientDark,
    Daylight,
}

/// Ambient floor `b` and additive Gaussian noise scale `sigma`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Illumination {
    pub kind: IlluminationKind,
    pub floor: f64,
    pub sigma: f64,
}

impl Illumination {
    pub fn ambient_dark() -> Self {
        Self {
            kind: IlluminationKind::AmbientDark,
            floor: 0.0,
            sigma: 0.005,
        }
    }

    pub fn daylight() -> Self {
        Self {
            kind: IlluminationKind::Daylight,
            floor: 0.15,
            sigma: 0.02,
        }
    }

    pub fn of(kind: IlluminationKind) -> Self {
        match kind {
            IlluminationKind::AmbientDark => Self::ambient_dark(),
            IlluminationKind::Daylight => Self::daylight(),
        }
    }

    /// Same regime without sensor noise.
    pub fn noiseless(mut self) -> Self {
        self.sigma = 0.0;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceKind {
    Wall,
    Whiteboard,
}

/// Diffuse albedo and specular mix weight of the relay surface.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Surface {
    pub kind: SurfaceKind,
    pub albedo: f64,
    pub specular: f64,
}

impl Surface {
    pub fn wall() -> Self {
        Self {
            kind: SurfaceKind::Wall,
            albedo: 0.6,
            specular: 0.0,
        }
    }

    pub fn whiteboard() -> Self {
        Self {
            kind: SurfaceKind::Whiteboard,
            albedo: 0.9,
            specular: 0.3,
        }
    }

    pub fn of(kind: SurfaceKind) -> Self {
        match kind {
            SurfaceKind::Wall => Self::wall(),
            SurfaceKind::Whiteboard => Self::whiteboard(),
        }
    }
}

/// Opaque rectangle parallel to the relay surface at `z = standoff_cm`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Occluder {
    pub center_cm: (f64, f64),
    pub width_cm: f64,
    pub height_cm: f64,
    pub standoff_cm: f64,
}

impl Occluder {
    /// 14 cm square, slightly off-axis, 50 cm in front of the relay surface.
    pub fn desk() -> Self {
        Self {
            center_cm: (3.0, -2.0),
            width_cm: 14.0,
            height_cm: 14.0,
            standoff_cm: 50.0,
        }
    }

    fn blocks(&self, p: [f64; 3], q: [f64; 3]) -> bool {
        // Segment q -> p crosses z = standoff at this fraction of its length.
        let t = self.standoff_cm / (p[2] - q[2]);
        let x = q[0] + t * (p[0] - q[0]);
        let y = q[1] + t * (p[1] - q[1]);
        (x - self.center_cm.0).abs() <= 0.5 * self.width_cm && (y - self.center_cm.1).abs() <= 0.5 * self.height_cm
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub id: usize,
    pub distance_cm: f64,
    pub angle_id: AngleId,
    pub illumination: Illumination,
    pub surface: Surface,
    pub occluder: Option<Occluder>,
}

impl ConditionSpec {
    pub fn new(
        id: usize,
        distance_cm: f64,
        angle_id: AngleId,
        illumination: IlluminationKind,
        surface: SurfaceKind,
        occluder: Option<Occluder>,
    ) -> Self {
        Self {
            id,
            distance_cm,
            angle_id,
            illumination: Illumination::of(illumination),
            surface: Surface::of(surface),
            occluder,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.distance_cm.is_finite() && self.distance_cm > 0.0) {
            return Err(Error::Config(format!(
                "hidden and relay planes intersect: distance {} cm must be > 0",
                self.distance_cm
            )));
        }
        let il = &self.illumination;
        if !(il.floor >= 0.0 && il.floor < 1.0 && il.sigma >= 0.0 && il.sigma.is_finite()) {
            return Err(Error::Config(format!(
                "illumination needs 0 <= b < 1 and sigma >= 0, got b={} sigma={}",
                il.floor, il.sigma
            )));
        }
        let s = &self.surface;
        if !(s.albedo > 0.0 && s.albedo <= 1.0 && s.specular >= 0.0 && s.specular < 1.0) {
            return Err(Error::Config(format!(
                "surface needs albedo in (0,1] and specular in [0,1), got {} and {}",
                s.albedo, s.specular
            )));
        }
        if let Some(o) = &self.occluder {
            if !(o.width_cm > 0.0 && o.height_cm > 0.0) {
                return Err(Error::Config(format!(
                    "occluder has zero area ({} x {} cm)",
                    o.width_cm, o.height_cm
                )));
            }
            if !(o.standoff_cm > 0.0 && o.standoff_cm < self.distance_cm) {
                return Err(Error::Config(format!(
                    "occluder standoff {} cm must lie strictly between the planes (0, {})",
                    o.standoff_cm, self.distance_cm
                )));
            }
        }
        Ok(())
    }

    /// True when both specs describe the same physics (ids ignored).
    pub fn same_physics(&self, other: &Self) -> bool {
        Self { id: 0, ..self.clone() } == Self { id: 0, ..other.clone() }
    }

    /// Short human label, e.g. `70;1;dark;wall;occ`.
    pub fn label(&self) -> String {
        format!(
            "{};{};{};{}{}",
            self.distance_cm,
            self.angle_id.index(),
            match self.illumination.kind {
                IlluminationKind::AmbientDark => "dark",
                IlluminationKind::Daylight => "daylight",
            },
            match self.surface.kind {
                SurfaceKind::Wall => "wall",
                SurfaceKind::Whiteboard => "whiteboard",
            },
            if self.occluder.is_some() { ";occ" } else { "" }
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneGeometry {
    pub hidden_res: (usize, usize),
    pub wall_res: (usize, usize),
    pub hidden_plane_size_cm: (f64, f64),
    pub wall_size_cm: (f64, f64),
    pub geometry_seed: u64,
}

impl SceneGeometry {
    /// 16 x 16 hidden and relay grids, 40 cm hidden plane, 1 m relay surface.
    pub fn desk(geometry_seed: u64) -> Self {
        Self {
            hidden_res: (16, 16),
            wall_res: (16, 16),
            hidden_plane_size_cm: (40.0, 40.0),
            wall_size_cm: (100.0, 100.0),
            geometry_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (hh, hw) = self.hidden_res;
        let (wh, ww) = self.wall_res;
        if hh < 2 || hw < 2 || wh < 2 || ww < 2 {
            return Err(Error::Config(format!(
                "resolutions must be >= 2, got hidden {hh}x{hw} wall {wh}x{ww}"
            )));
        }
        let sizes = [
            self.hidden_plane_size_cm.0,
            self.hidden_plane_size_cm.1,
            self.wall_size_cm.0,
            self.wall_size_cm.1,
        ];
        if sizes.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Config(format!("physical sizes must be > 0, got {sizes:?}")));
        }
        Ok(())
    }

    pub fn hidden_len(&self) -> usize {
        self.hidden_res.0 * self.hidden_res.1
    }

    pub fn wall_len(&self) -> usize {
        self.wall_res.0 * self.wall_res.1
    }
}

/// Centers of an `rows x cols` grid spanning `size` (height, width), row-major,
/// rows running top (+y) to bottom.
fn grid_centers(res: (usize, usize), size: (f64, f64), z: f64) -> Vec<[f64; 3]> {
    let (rows, cols) = res;
    let (height, width) = size;
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let x = (c as f64 + 0.5) / cols as f64 * width - 0.5 * width;
            let y = 0.5 * height - (r as f64 + 0.5) / rows as f64 * height;
            out.push([x, y, z]);
        }
    }
    out
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

/// Dense nonnegative map from hidden intensities to relay-surface intensities.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportMatrix {
    entries: DMatrix<f64>,
    cond: ConditionSpec,
    geom: SceneGeometry,
}

impl TransportMatrix {
    /// Wrap precomputed entries, checking shape and nonnegativity.
    pub fn from_parts(entries: DMatrix<f64>, cond: ConditionSpec, geom: SceneGeometry) -> Result<Self> {
        if entries.nrows() != geom.wall_len() || entries.ncols() != geom.hidden_len() {
            return Err(Error::Dimension(format!(
                "transport matrix is {}x{}, geometry needs {}x{}",
                entries.nrows(),
                entries.ncols(),
                geom.wall_len(),
                geom.hidden_len()
            )));
        }
        if entries.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Numeric("transport entries must be finite and >= 0".into()));
        }
        Ok(Self { entries, cond, geom })
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn cond(&self) -> &ConditionSpec {
        &self.cond
    }

    pub fn geom(&self) -> &SceneGeometry {
        &self.geom
    }

    pub fn rows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn cols(&self) -> usize {
        self.entries.ncols()
    }
}

/// Raw radiometric transport before global scaling.
fn raw_transport(cond: &ConditionSpec, geom: &SceneGeometry) -> DMatrix<f64> {
    let d = cond.distance_cm;
    let hidden = grid_centers(geom.hidden_res, geom.hidden_plane_size_cm, d);
    let wall = grid_centers(geom.wall_res, geom.wall_size_cm, 0.0);

    let tilt = cond.angle_id.tilt_deg().to_radians();
    let camera = [CAMERA_DISTANCE_CM * tilt.sin(), 0.0, CAMERA_DISTANCE_CM * tilt.cos()];

    let mut rng = ChaCha8Rng::seed_from_u64(geom.geometry_seed);
    let albedo: Vec<f64> = wall
        .iter()
        .map(|_| {
            let u: f64 = rng.random_range(-1.0..=1.0);
            match cond.surface.kind {
                SurfaceKind::Wall => cond.surface.albedo * (1.0 + WALL_TEXTURE * u),
                SurfaceKind::Whiteboard => cond.surface.albedo,
            }
        })
        .collect();

    let s = cond.surface.specular;
    let mut a = DMatrix::zeros(wall.len(), hidden.len());
    for (i, &q) in wall.iter().enumerate() {
        let to_cam = sub(camera, q);
        let cam_dist = norm(to_cam);
        let view = [to_cam[0] / cam_dist, to_cam[1] / cam_dist, to_cam[2] / cam_dist];
        let foreshortening = view[2];
        for (j, &p) in hidden.iter().enumerate() {
            if let Some(o) = &cond.occluder {
                if o.blocks(p, q) {
                    continue;
                }
            }
            let delta = sub(q, p);
            let r2 = dot(delta, delta);
            let r = r2.sqrt();
            let cos = d / r;
            let diffuse = cos * cos / r2;
            let specular = if s > 0.0 {
                let reflected = [delta[0] / r, delta[1] / r, -delta[2] / r];
                dot(reflected, view).max(0.0).powi(SPECULAR_EXPONENT)
            } else {
                0.0
            };
            a[(i, j)] = albedo[i] * ((1.0 - s) * diffuse + s * specular) * foreshortening;
        }
    }
    a
}

/// Build `A` for one condition: diffuse plus specular lobe, hard occluder
/// visibility, per-patch view foreshortening, then one global scale so an
/// all-ones hidden image plus the ambient floor peaks at exactly 1.
pub fn build_transport_matrix(cond: &ConditionSpec, geom: &SceneGeometry) -> Result<TransportMatrix> {
    cond.validate()?;
    geom.validate()?;
    let mut a = raw_transport(cond, geom);
    let brightest = a.row_iter().map(|r| r.sum()).fold(0.0, f64::max);
    if brightest > 0.0 {
        a *= (1.0 - cond.illumination.floor) / brightest;
    }
    TransportMatrix::from_parts(a, cond.clone(), geom.clone())
}

/// Global scale applied on top of the raw radiometry (`1` when `A` is all zero).
pub fn row_normalizer(cond: &ConditionSpec, geom: &SceneGeometry) -> Result<f64> {
    cond.validate()?;
    geom.validate()?;
    let a = raw_transport(cond, geom);
    let brightest = a.row_iter().map(|r| r.sum()).fold(0.0, f64::max);
    Ok(if brightest > 0.0 {
        (1.0 - cond.illumination.floor) / brightest
    } else {
        1.0
    })
}

fn check_hidden<T: Scalar>(a: &TransportMatrix, x: &ImageGrid<T>) -> Result<()> {
    if (x.height(), x.width()) != a.geom.hidden_res {
        return Err(Error::Dimension(format!(
            "hidden image is {}x{}, transport expects {:?}",
            x.height(),
            x.width(),
            a.geom.hidden_res
        )));
    }
    Ok(())
}

fn check_wall<T: Scalar>(a: &TransportMatrix, y: &ImageGrid<T>) -> Result<()> {
    if (y.height(), y.width()) != a.geom.wall_res {
        return Err(Error::Dimension(format!(
            "projection is {}x{}, transport expects {:?}",
            y.height(),
            y.width(),
            a.geom.wall_res
        )));
    }
    Ok(())
}

/// `y = clip(A x + b + n, 0, 1)` per channel with seeded Gaussian `n`.
pub fn render_projection<T: Scalar>(a: &TransportMatrix, x: &ImageGrid<T>, noise_seed: u64) -> Result<ImageGrid<T>> {
    check_hidden(a, x)?;
    let (wh, ww) = a.geom.wall_res;
    let il = a.cond.illumination;
    let channels = x.channels();
    let xs = DMatrix::from_fn(a.cols(), channels, |j, c| x.plane(c)[j].as_f64());
    let ax = &a.entries * xs;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise = Normal::new(0.0, il.sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut y = ImageGrid::zeros(wh, ww, channels);
    for c in 0..channels {
        let plane = y.plane_mut(c);
        for (i, v) in plane.iter_mut().enumerate() {
            let n = if il.sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            *v = T::lit((ax[(i, c)] + il.floor + n).clamp(0.0, 1.0));
        }
    }
    Ok(y)
}

/// Factored ridge normal equations `(A^T A + reg I)`, reusable across images.
pub struct TikhonovSolver {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    at: DMatrix<f64>,
    floor: f64,
    hidden_res: (usize, usize),
    wall_res: (usize, usize),
}

/// Reciprocal condition estimate below which an unregularized system is refused.
const MIN_RCOND: f64 = 1e-14;

impl TikhonovSolver {
    pub fn new(a: &TransportMatrix, reg: f64) -> Result<Self> {
        if !(reg >= 0.0 && reg.is_finite()) {
            return Err(Error::Config(format!("regularization must be finite and >= 0, got {reg}")));
        }
        let at = a.entries.transpose();
        let mut normal = &at * &a.entries;
        for k in 0..normal.nrows() {
            normal[(k, k)] += reg;
        }
        let chol = nalgebra::Cholesky::new(normal).ok_or_else(|| {
            Error::IllConditioned(format!("normal matrix is not positive definite (reg = {reg:e})"))
        })?;
        if reg == 0.0 {
            let diag = chol.l_dirty().diagonal();
            let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            let rcond = (lo / hi).powi(2);
            if !(rcond >= MIN_RCOND) {
                return Err(Error::IllConditioned(format!(
                    "normal matrix is numerically singular (rcond estimate {rcond:e}); use reg > 0"
                )));
            }
        }
        Ok(Self {
            chol,
            at,
            floor: a.cond.illumination.floor,
            hidden_res: a.geom.hidden_res,
            wall_res: a.geom.wall_res,
        })
    }

    /// Estimate `x` from `y` after removing the known ambient floor; clipped to `[0, 1]`.
    pub fn solve<T: Scalar>(&self, y: &ImageGrid<T>) -> Result<ImageGrid<T>> {
        if (y.height(), y.width()) != self.wall_res {
            return Err(Error::Dimension(format!(
                "projection is {}x{}, solver expects {:?}",
                y.height(),
                y.width(),
                self.wall_res
            )));
        }
        let (hh, hw) = self.hidden_res;
        let mut x = ImageGrid::zeros(hh, hw, y.channels());
        for c in 0..y.channels() {
            let rhs = DVector::from_iterator(y.plane(c).len(), y.plane(c).iter().map(|v| v.as_f64() - self.floor));
            let sol = self.chol.solve(&(&self.at * rhs));
            for (dst, v) in x.plane_mut(c).iter_mut().zip(sol.iter()) {
                *dst = T::lit(v.clamp(0.0, 1.0));
            }
        }
        Ok(x)
    }
}

/// Ridge-regularized least squares via the normal equations, clipped to `[0, 1]`.
pub fn classical_reconstruct<T: Scalar>(a: &TransportMatrix, y: &ImageGrid<T>, reg: f64) -> Result<ImageGrid<T>> {
    check_wall(a, y)?;
    TikhonovSolver::new(a, reg)?.solve(y)
}

/// Smallest singular value treated as nonzero.
pub const SINGULAR_FLOOR: f64 = 1e-300;

/// `sigma_max / sigma_min` of a dense matrix; `+inf` when `sigma_min < 1e-300`.
pub fn matrix_condition_number(m: &DMatrix<f64>) -> Result<f64> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("matrix has non-finite entries".into()));
    }
    if m.is_empty() {
        return Err(Error::Dimension("empty matrix".into()));
    }
    let sv = m.clone().singular_values();
    let hi = sv.max();
    let lo = sv.min();
    Ok(if lo < SINGULAR_FLOOR { f64::INFINITY } else { hi / lo })
}

pub fn condition_number(a: &TransportMatrix) -> Result<f64> {
    matrix_condition_number(&a.entries)
}

const MAGIC: &[u8; 5] = b"NLTM1";

#[derive(Serialize, Deserialize)]
struct Metadata {
    cond: ConditionSpec,
    geom: SceneGeometry,
}

/// Container: magic, u64 rows, u64 cols, row-major f64 (LE), u64 length, JSON metadata.
pub fn encode_transport(a: &TransportMatrix) -> Vec<u8> {
    let meta = serde_json::to_vec(&json_sorted(&Metadata {
        cond: a.cond.clone(),
        geom: a.geom.clone(),
    }))
    .expect("metadata serializes");
    let mut out = Vec::with_capacity(5 + 16 + a.entries.len() * 8 + 8 + meta.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(a.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(a.cols() as u64).to_le_bytes());
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            out.extend_from_slice(&a.entries[(i, j)].to_le_bytes());
        }
    }
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    out
}

pub fn decode_transport(bytes: &[u8]) -> Result<TransportMatrix> {
    let mut r = bytes;
    let mut magic = [0u8; 5];
    let mut word = [0u8; 8];
    let short = |_| Error::Format("truncated transport matrix file".into());
    r.read_exact(&mut magic).map_err(short)?;
    if &magic != MAGIC {
        return Err(Error::Format("not an NLTM1 transport matrix".into()));
    }
    r.read_exact(&mut word).map_err(short)?;
    let rows = u64::from_le_bytes(word) as usize;
    r.read_exact(&mut word).map_err(short)?;
    let cols = u64::from_le_bytes(word) as usize;
    let n = rows
        .checked_mul(cols)
        .filter(|n| n.saturating_mul(8) <= r.len())
        .ok_or_else(|| Error::Format("transport matrix size exceeds file".into()))?;
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut word).map_err(short)?;
        values.push(f64::from_le_bytes(word));
    }
    r.read_exact(&mut word).map_err(short)?;
    let len = u64::from_le_bytes(word) as usize;
    if r.len() != len {
        return Err(Error::Format("transport metadata length mismatch".into()));
    }
    let meta: Metadata = serde_json::from_slice(r)?;
    TransportMatrix::from_parts(DMatrix::from_row_slice(rows, cols, &values), meta.cond, meta.geom)
}

/// Serialize through `serde_json::Value`, whose maps have sorted keys.
fn json_sorted<S: Serialize>(v: &S) -> serde_json::Value {
    serde_json::to_value(v).expect("value serializes")
}

/// Content hash of everything that determines `A` (the condition id does not).
pub fn transport_cache_key(cond: &ConditionSpec, geom: &SceneGeometry) -> String {
    let meta = Metadata {
        cond: ConditionSpec { id: 0, ..cond.clone() },
        geom: geom.clone(),
    };
    let text = serde_json::to_string(&json_sorted(&meta)).expect("metadata serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// `<dir>/<key>.nltm`
pub fn transport_cache_path(dir: &Path, cond: &ConditionSpec, geom: &SceneGeometry) -> PathBuf {
    dir.join(format!("{}.nltm", transport_cache_key(cond, geom)))
}

pub fn save_transport(a: &TransportMatrix, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode_transport(a)).map_err(|e| Error::io(path, e))
}

pub fn load_transport(path: &Path) -> Result<TransportMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_transport(&bytes)
}

/// Load a cached matrix, building and caching it when absent. The returned
/// matrix carries `cond`'s id even if the cache was written under another id.
pub fn cached_transport(dir: &Path, cond: &ConditionSpec, geom: &SceneGeometry) -> Result<TransportMatrix> {
    let path = transport_cache_path(dir, cond, geom);
    if path.exists() {
        let a = load_transport(&path)?;
        if a.cond.same_physics(cond) && &a.geom == geom {
            return TransportMatrix::from_parts(a.entries, cond.clone(), geom.clone());
        }
    }
    let a = build_transport_matrix(cond, geom)?;
    save_transport(&a, &path)?;
    Ok(a)
}

/// Cached matrix only; a missing file is an error.
pub fn require_cached_transport(dir: &Path, cond: &ConditionSpec, geom: &SceneGeometry) -> Result<TransportMatrix> {
    let path = transport_cache_path(dir, cond, geom);
    if !path.exists() {
        return Err(Error::MissingMatrix {
            condition_id: cond.id,
            path,
        });
    }
    let a = load_transport(&path)?;
    TransportMatrix::from_parts(a.entries, cond.clone(), geom.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_geom() -> SceneGeometry {
        SceneGeometry {
            hidden_res: (3, 3),
            wall_res: (3, 3),
            hidden_plane_size_cm: (30.0, 30.0),
            wall_size_cm: (30.0, 30.0),
            geometry_seed: 7,
        }
    }

    fn dark_wall(d: f64) -> ConditionSpec {
        ConditionSpec::new(0, d, AngleId::One, IlluminationKind::AmbientDark, SurfaceKind::Wall, None)
    }

    #[test]
    fn head_on_entry_is_albedo_over_distance_squared() {
        let geom = tiny_geom();
        let cond = dark_wall(70.0);
        let a = build_transport_matrix(&cond, &geom).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let u: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let rho = 0.6 * (1.0 + WALL_TEXTURE * u[4]);
        let k = row_normalizer(&cond, &geom).unwrap();
        let expected = rho / (70.0 * 70.0) * k;
        assert!((a.entries()[(4, 4)] - expected).abs() <= 1e-15 * expected.max(1.0));
    }

    #[test]
    fn occluded_pairs_are_exactly_zero() {
        let geom = tiny_geom();
        let mut cond = dark_wall(70.0);
        cond.occluder = Some(Occluder {
            center_cm: (0.0, 0.0),
            width_cm: 4.0,
            height_cm: 4.0,
            standoff_cm: 35.0,
        });
        let a = build_transport_matrix(&cond, &geom).unwrap();
        // Center pixel to center patch runs straight through the occluder.
        assert_eq!(a.entries()[(4, 4)], 0.0);
        let free = build_transport_matrix(&dark_wall(70.0), &geom).unwrap();
        assert!(free.entries()[(4, 4)] > 0.0);
        assert!(a.entries().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn invalid_geometry_is_rejected() {
        let geom = tiny_geom();
        for d in [0.0, -5.0] {
            let err = build_transport_matrix(&dark_wall(d), &geom).unwrap_err();
            assert_eq!(err.class(), "config");
        }
        let mut cond = dark_wall(70.0);
        cond.occluder = Some(Occluder {
            center_cm: (0.0, 0.0),
            width_cm: 0.0,
            height_cm: 4.0,
            standoff_cm: 35.0,
        });
        assert_eq!(build_transport_matrix(&cond, &geom).unwrap_err().class(), "config");
    }

    #[test]
    fn brightest_row_plus_floor_is_one() {
        let geom = tiny_geom();
        let mut cond = dark_wall(70.0);
        cond.illumination = Illumination::daylight();
        cond.surface = Surface::whiteboard();
        let a = build_transport_matrix(&cond, &geom).unwrap();
        let brightest = a.entries().row_iter().map(|r| r.sum()).fold(0.0, f64::max);
        assert!((brightest + 0.15 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_and_unit_inputs_render_trivially() {
        let geom = tiny_geom();
        let cond = ConditionSpec {
            illumination: Illumination::ambient_dark().noiseless(),
            ..dark_wall(70.0)
        };
        let a = build_transport_matrix(&cond, &geom).unwrap();
        let zero = ImageGrid::<f64>::zeros(3, 3, 1);
        assert!(render_projection(&a, &zero, 1).unwrap().data().iter().all(|v| *v == 0.0));
        let mut unit = zero.clone();
        unit.set(1, 2, 0, 1.0);
        let y = render_projection(&a, &unit, 1).unwrap();
        for i in 0..9 {
            assert_eq!(y.data()[i], a.entries()[(i, 5)].clamp(0.0, 1.0));
        }
        let wrong = ImageGrid::<f64>::zeros(4, 3, 1);
        assert_eq!(render_projection(&a, &wrong, 1).unwrap_err().class(), "dimension");
    }

    #[test]
    fn tikhonov_trivial_cases() {
        let geom = tiny_geom();
        let a = build_transport_matrix(&dark_wall(70.0), &geom).unwrap();
        let zero = ImageGrid::<f64>::zeros(3, 3, 3);
        for reg in [0.0, 1e-3, 1.0] {
            match classical_reconstruct(&a, &zero, reg) {
                Ok(x) => assert!(x.data().iter().all(|v| *v == 0.0)),
                Err(e) => assert_eq!(e.class(), "ill_conditioned"),
            }
        }
        let ones = ImageGrid::<f64>::from_fn(3, 3, 1, |_, _, _| 1.0);
        let y = render_projection(&a, &ones, 0).unwrap();
        let x = classical_reconstruct(&a, &y, 1e12).unwrap();
        let n = x.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(n < 1e-6);
    }

    #[test]
    fn singular_system_without_regularization_is_refused() {
        let geom = tiny_geom();
        let cond = dark_wall(70.0);
        // Rank-one transport: every row identical.
        let entries = DMatrix::from_element(9, 9, 0.01);
        let a = TransportMatrix::from_parts(entries, cond, geom).unwrap();
        let y = ImageGrid::<f64>::zeros(3, 3, 1);
        assert_eq!(classical_reconstruct(&a, &y, 0.0).unwrap_err().class(), "ill_conditioned");
        assert!(classical_reconstruct(&a, &y, 1e-3).is_ok());
    }

    #[test]
    fn condition_number_of_simple_matrices() {
        assert!((matrix_condition_number(&DMatrix::identity(4, 4)).unwrap() - 1.0).abs() < 1e-14);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0]));
        assert!((matrix_condition_number(&d).unwrap() - 2.0).abs() < 1e-14);
        let z = DMatrix::<f64>::zeros(2, 2);
        assert_eq!(matrix_condition_number(&z).unwrap(), f64::INFINITY);
        let mut bad = DMatrix::<f64>::identity(2, 2);
        bad[(0, 1)] = f64::NAN;
        assert_eq!(matrix_condition_number(&bad).unwrap_err().class(), "numeric");
    }

    #[test]
    fn container_round_trips_and_cache_key_ignores_id() {
        let geom = tiny_geom();
        let cond = dark_wall(100.0);
        let a = build_transport_matrix(&cond, &geom).unwrap();
        let bytes = encode_transport(&a);
        assert_eq!(&bytes[..5], b"NLTM1");
        assert_eq!(decode_transport(&bytes).unwrap(), a);
        let other = ConditionSpec { id: 3, ..cond.clone() };
        assert_eq!(transport_cache_key(&cond, &geom), transport_cache_key(&other, &geom));
        assert_ne!(transport_cache_key(&cond, &geom), transport_cache_key(&dark_wall(70.0), &geom));
        let mut truncated = bytes.clone();
        truncated.truncate(bytes.len() - 3);
        assert_eq!(decode_transport(&truncated).unwrap_err().class(), "format");
    }

    #[test]
    fn cache_builds_once_and_reuses() {
        let dir = tempfile::tempdir().unwrap();
        let geom = tiny_geom();
        let cond = dark_wall(70.0);
        assert_eq!(
            require_cached_transport(dir.path(), &cond, &geom).unwrap_err().class(),
            "missing_matrix"
        );
        let a = cached_transport(dir.path(), &cond, &geom).unwrap();
        let relabeled = ConditionSpec { id: 2, ..cond };
        let b = require_cached_transport(dir.path(), &relabeled, &geom).unwrap();
        assert_eq!(a.entries(), b.entries());
        assert_eq!(b.cond().id, 2);
    }
}
