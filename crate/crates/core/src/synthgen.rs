//! Seeded co-generation of sky images and PV power.
//!
//! A single cloud disk drifts across a sky gradient with a constant per-day
//! velocity; plant output is the clear-sky profile attenuated by the fraction
//! of the sun disk the cloud covers. Each day draws from its own ChaCha
//! stream, so days can be rendered independently.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataio::{image_file_name, write_power_csv, DatasetLayout, PowerSeries, SkyImage};
use crate::error::{Error, Result};

/// 2019-01-01T08:00:00Z
pub const DEFAULT_START_EPOCH: i64 = 1_546_329_600;
pub const RAW_CADENCE_S: i64 = 60;
const CLOUD_GRAY: f32 = 0.85 * 255.0;
const CLOUD_EDGE_PX: f32 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub image_size: usize,
    pub sun_center: (f32, f32),
    pub sun_radius: f32,
    pub cloud_radius: f32,
    /// Mean drift speed in pixels per raw (1-minute) step.
    pub cloud_velocity: f32,
    /// Relative per-day speed jitter.
    pub velocity_jitter: f32,
    pub attenuation: f32,
    pub day_length_steps: usize,
    pub capacity_kw: f32,
    pub noise_std: f32,
    pub seed: u64,
    pub start_epoch: i64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self::plant_30kw(0)
    }
}

impl SceneConfig {
    /// Larger rooftop array.
    pub fn plant_30kw(seed: u64) -> Self {
        Self {
            image_size: 64,
            sun_center: (32.0, 26.0),
            sun_radius: 5.0,
            cloud_radius: 10.0,
            cloud_velocity: 0.8,
            velocity_jitter: 0.25,
            attenuation: 0.8,
            day_length_steps: 240,
            capacity_kw: 30.0,
            noise_std: 0.1,
            seed,
            start_epoch: DEFAULT_START_EPOCH,
        }
    }

    /// Smaller plant at a second site: different sun placement, cloud size
    /// and drift speed.
    pub fn plant_6kw(seed: u64) -> Self {
        Self {
            sun_center: (28.0, 34.0),
            sun_radius: 6.0,
            cloud_radius: 9.0,
            cloud_velocity: 0.7,
            capacity_kw: 6.0,
            noise_std: 0.02,
            ..Self::plant_30kw(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("scene config: {m}")));
        if !(0.0..=1.0).contains(&self.attenuation) {
            return bad("attenuation must lie in [0, 1]");
        }
        if !(self.sun_radius > 0.0 && self.cloud_radius > 0.0) {
            return bad("radii must be positive");
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be >= 0");
        }
        if self.image_size == 0 || self.day_length_steps == 0 {
            return bad("image size and day length must be positive");
        }
        if !(self.cloud_velocity > 0.0) || !(0.0..1.0).contains(&self.velocity_jitter) {
            return bad("cloud velocity must be positive with jitter in [0, 1)");
        }
        if !(self.capacity_kw > 0.0) {
            return bad("capacity must be positive");
        }
        Ok(())
    }
}

pub fn clear_sky_power(step: usize, cfg: &SceneConfig) -> Result<f32> {
    if step >= cfg.day_length_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} outside day of {} steps",
            cfg.day_length_steps
        )));
    }
    let s = (PI * step as f64 / cfg.day_length_steps as f64).sin();
    Ok((cfg.capacity_kw as f64 * s * s) as f32)
}

/// Area of the intersection of two disks with centre distance `d`.
pub fn disk_overlap_area(d: f64, r1: f64, r2: f64) -> f64 {
    if d >= r1 + r2 {
        return 0.0;
    }
    if d <= (r1 - r2).abs() {
        let r = r1.min(r2);
        return PI * r * r;
    }
    let a1 = ((d * d + r1 * r1 - r2 * r2) / (2.0 * d * r1)).clamp(-1.0, 1.0).acos();
    let a2 = ((d * d + r2 * r2 - r1 * r1) / (2.0 * d * r2)).clamp(-1.0, 1.0).acos();
    let k = (-d + r1 + r2) * (d + r1 - r2) * (d - r1 + r2) * (d + r1 + r2);
    r1 * r1 * a1 + r2 * r2 * a2 - 0.5 * k.max(0.0).sqrt()
}

/// Per-day cloud trajectory: the cloud enters from one edge and crosses
/// perpendicular to it; each crossing draws a fresh lateral offset.
#[derive(Clone, Debug)]
struct CloudTrack {
    /// Unit drift direction.
    dir: (f32, f32),
    speed: f32,
    along: f32,
    lateral: f32,
}

impl CloudTrack {
    fn new(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Self {
        let dir = match rng.random_range(0..4u8) {
            0 => (1.0, 0.0),
            1 => (-1.0, 0.0),
            2 => (0.0, 1.0),
            _ => (0.0, -1.0),
        };
        let speed = cfg.cloud_velocity * (1.0 + cfg.velocity_jitter * rng.random_range(-1.0..=1.0f32));
        let span = cfg.image_size as f32 + 2.0 * cfg.cloud_radius;
        let mut track = Self {
            dir,
            speed,
            along: rng.random_range(0.0..span),
            lateral: 0.0,
        };
        track.lateral = track.draw_lateral(cfg, rng);
        track
    }

    fn draw_lateral(&self, cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> f32 {
        let reach = 1.2 * (cfg.sun_radius + cfg.cloud_radius);
        let sun_lateral = if self.dir.0 != 0.0 {
            cfg.sun_center.1
        } else {
            cfg.sun_center.0
        };
        sun_lateral + rng.random_range(-reach..=reach)
    }

    fn center(&self, cfg: &SceneConfig) -> (f32, f32) {
        let size = cfg.image_size as f32;
        // along-track position measured from just outside the entry edge
        let p = self.along - cfg.cloud_radius;
        match self.dir {
            (1.0, _) => (p, self.lateral),
            (-1.0, _) => (size - p, self.lateral),
            (_, 1.0) => (self.lateral, p),
            _ => (self.lateral, size - p),
        }
    }

    fn advance(&mut self, cfg: &SceneConfig, rng: &mut ChaCha8Rng) {
        self.along += self.speed;
        let span = cfg.image_size as f32 + 2.0 * cfg.cloud_radius;
        if self.along > span {
            self.along -= span;
            self.lateral = self.draw_lateral(cfg, rng);
        }
    }
}

fn sky_background(x: usize, y: usize, size: usize) -> [f32; 3] {
    let t = y as f32 / size.max(1) as f32;
    let u = x as f32 / size.max(1) as f32;
    [60.0 + 70.0 * t, 120.0 + 60.0 * t + 10.0 * u, 235.0 - 25.0 * t]
}

/// Rasterizes one frame: sky gradient, sun disk, then the cloud disk with a
/// soft edge.
pub fn render_frame(cfg: &SceneConfig, cloud: (f32, f32), timestamp: i64) -> SkyImage {
    let size = cfg.image_size;
    let mut pixels = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let mut c = sky_background(x, y, size);
            let ds = ((px - cfg.sun_center.0).powi(2) + (py - cfg.sun_center.1).powi(2)).sqrt();
            let sun_alpha = (cfg.sun_radius - ds + 0.5).clamp(0.0, 1.0);
            let sun = [255.0, 248.0, 215.0];
            for k in 0..3 {
                c[k] = c[k] * (1.0 - sun_alpha) + sun[k] * sun_alpha;
            }
            let dc = ((px - cloud.0).powi(2) + (py - cloud.1).powi(2)).sqrt();
            let cloud_alpha = ((cfg.cloud_radius - dc) / CLOUD_EDGE_PX).clamp(0.0, 1.0);
            for v in c.iter_mut() {
                *v = *v * (1.0 - cloud_alpha) + CLOUD_GRAY * cloud_alpha;
            }
            pixels.extend(c.iter().map(|v| v.round().clamp(0.0, 255.0) as u8));
        }
    }
    SkyImage {
        width: size,
        height: size,
        pixels,
        timestamp,
    }
}

/// Fraction of the sun disk covered by the cloud disk.
pub fn sun_occlusion(cfg: &SceneConfig, cloud: (f32, f32)) -> f64 {
    let d = (((cloud.0 - cfg.sun_center.0).powi(2) + (cloud.1 - cfg.sun_center.1).powi(2)) as f64).sqrt();
    let r = cfg.sun_radius as f64;
    disk_overlap_area(d, r, cfg.cloud_radius as f64) / (PI * r * r)
}

/// Renders one day at 1-minute cadence and returns the frames and the power trace.
pub fn render_and_power(day: usize, cfg: &SceneConfig) -> Result<(Vec<SkyImage>, PowerSeries)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(day as u64);
    let noise = Normal::new(0.0f64, cfg.noise_std as f64)
        .map_err(|e| Error::InvalidArgument(format!("noise distribution: {e}")))?;
    let mut track = CloudTrack::new(cfg, &mut rng);
    let day_start = cfg.start_epoch + day as i64 * 86_400;

    let mut images = Vec::with_capacity(cfg.day_length_steps);
    let mut timestamps = Vec::with_capacity(cfg.day_length_steps);
    let mut values = Vec::with_capacity(cfg.day_length_steps);
    let limit = 3.0 * cfg.noise_std as f64;
    for step in 0..cfg.day_length_steps {
        let t = day_start + step as i64 * RAW_CADENCE_S;
        let center = track.center(cfg);
        let clear = clear_sky_power(step, cfg)? as f64;
        let covered = sun_occlusion(cfg, center);
        let eps = if cfg.noise_std > 0.0 {
            noise.sample(&mut rng).clamp(-limit, limit)
        } else {
            0.0
        };
        let p = (clear * (1.0 - cfg.attenuation as f64 * covered) + eps).max(0.0);
        images.push(render_frame(cfg, center, t));
        timestamps.push(t);
        values.push(p as f32);
        track.advance(cfg, &mut rng);
    }
    Ok((images, PowerSeries::new(timestamps, values)?))
}

/// Renders `days` consecutive days and concatenates them.
pub fn generate(days: usize, cfg: &SceneConfig) -> Result<(Vec<SkyImage>, PowerSeries)> {
    if days == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut images = Vec::new();
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for day in 0..days {
        let (imgs, p) = render_and_power(day, cfg)?;
        images.extend(imgs);
        timestamps.extend(p.timestamps);
        values.extend(p.values);
    }
    Ok((images, PowerSeries::new(timestamps, values)?))
}

pub fn encode_ppm(img: &SkyImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub days: usize,
    pub steps_per_day: usize,
    pub images: usize,
    pub power_rows: usize,
    pub seed: u64,
    pub image_size: usize,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        format!(
            "days = {}\nsteps_per_day = {}\nimages = {}\npower_rows = {}\nseed = {}\nimage_size = {}\n",
            self.days, self.steps_per_day, self.images, self.power_rows, self.seed, self.image_size
        )
    }
}

/// Writes `power.csv`, `images/*.ppm` and `manifest.txt` under `out`.
pub fn write_dataset(days: usize, cfg: &SceneConfig, out: &Path) -> Result<Manifest> {
    if days == 0 {
        return Err(Error::EmptyDataset);
    }
    cfg.validate()?;
    let layout = DatasetLayout::new(out);
    let images_dir = layout.images_dir();
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    let mut n_images = 0;
    for day in 0..days {
        let (imgs, p) = render_and_power(day, cfg)?;
        for img in &imgs {
            let path: PathBuf = images_dir.join(image_file_name(img.timestamp));
            fs::write(&path, encode_ppm(img)).map_err(|e| Error::io(&path, e))?;
        }
        n_images += imgs.len();
        timestamps.extend(p.timestamps);
        values.extend(p.values);
    }
    let series = PowerSeries::new(timestamps, values)?;
    write_power_csv(&layout.power_csv(), &series)?;
    let manifest = Manifest {
        days,
        steps_per_day: cfg.day_length_steps,
        images: n_images,
        power_rows: series.len(),
        seed: cfg.seed,
        image_size: cfg.image_size,
    };
    let path = out.join("manifest.txt");
    fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
