//! Dataset ingestion: power CSV, binary PPM sky images, 2-minute resampling,
//! window/target/image alignment and the chronological split.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDateTime};

use crate::error::{Error, Result};

/// Cadence of the resampled series, in seconds.
pub const RESAMPLED_CADENCE_S: i64 = 120;

#[derive(Clone, Debug, PartialEq)]
pub struct PowerSeries {
    pub timestamps: Vec<i64>,
    pub values: Vec<f32>,
}

impl PowerSeries {
    pub fn new(timestamps: Vec<i64>, values: Vec<f32>) -> Result<Self> {
        if timestamps.len() != values.len() {
            return Err(Error::InvalidArgument(format!(
                "{} timestamps for {} values",
                timestamps.len(),
                values.len()
            )));
        }
        if let Some(w) = timestamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(format!(
                "timestamps not strictly increasing at index {}",
                w + 1
            )));
        }
        if let Some(i) = values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "power at index {i} is {} (must be finite and >= 0)",
                values[i]
            )));
        }
        Ok(Self { timestamps, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkyImage {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB.
    pub pixels: Vec<u8>,
    pub timestamp: i64,
}

impl SkyImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>, timestamp: i64) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height * 3 {
            return Err(Error::InvalidArgument(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
            timestamp,
        })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

/// One aligned example. `images` holds the most recent frames, oldest first;
/// the last one is taken at `anchor_time`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub input_window: Vec<f32>,
    pub target: Vec<f32>,
    pub images: Vec<SkyImage>,
    pub anchor_time: i64,
    pub cadence_s: i64,
}

impl SampleRecord {
    /// Frame taken at the anchor.
    pub fn image(&self) -> &SkyImage {
        self.images.last().expect("sample without image")
    }

    pub fn input_len(&self) -> usize {
        self.input_window.len()
    }

    pub fn horizon(&self) -> usize {
        self.target.len()
    }

    /// Closed time interval covered by the input window.
    pub fn input_interval(&self) -> (i64, i64) {
        let start = self.anchor_time - (self.input_len() as i64 - 1) * self.cadence_s;
        (start, self.anchor_time)
    }

    /// Closed time interval covered by the target.
    pub fn target_interval(&self) -> (i64, i64) {
        (
            self.anchor_time + self.cadence_s,
            self.anchor_time + self.horizon() as i64 * self.cadence_s,
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<SampleRecord>,
    pub val: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
}

impl DatasetSplit {
    /// Drops leading validation and test samples whose input window reaches
    /// back into the target interval of an earlier split.
    pub fn purged(mut self) -> Self {
        fn last_target_end(samples: &[SampleRecord]) -> Option<i64> {
            samples.iter().map(|s| s.target_interval().1).max()
        }
        let mut horizon_end = last_target_end(&self.train);
        for part in [&mut self.val, &mut self.test] {
            if let Some(end) = horizon_end {
                let keep_from = part
                    .iter()
                    .position(|s| s.input_interval().0 > end)
                    .unwrap_or(part.len());
                part.drain(..keep_from);
            }
            horizon_end = horizon_end.max(last_target_end(part));
        }
        self
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

/// Parses an ISO-8601 timestamp with an explicit offset into epoch seconds.
pub fn parse_timestamp(text: &str) -> Option<i64> {
    DateTime::parse_from_rfc3339(text.trim())
        .ok()
        .map(|t| t.timestamp())
}

pub fn format_timestamp(epoch: i64) -> String {
    DateTime::from_timestamp(epoch, 0)
        .map(|t| t.format("%Y-%m-%dT%H:%M:%SZ").to_string())
        .unwrap_or_else(|| epoch.to_string())
}

pub fn load_power_csv(path: &Path) -> Result<PowerSeries> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_power_csv(&text, path)
}

pub fn parse_power_csv(text: &str, path: &Path) -> Result<PowerSeries> {
    let csv_err = |line: usize, msg: String| Error::Csv {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim().trim_start_matches('\u{feff}') == "timestamp,power_kw" => {}
        Some((_, header)) => {
            return Err(csv_err(1, format!("expected header `timestamp,power_kw`, got `{header}`")))
        }
        None => return Err(csv_err(1, "empty file".into())),
    }
    let mut rows: Vec<(i64, f32, usize)> = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let (Some(ts), Some(kw), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(csv_err(lineno, format!("expected 2 fields in `{line}`")));
        };
        let ts = parse_timestamp(ts).ok_or_else(|| csv_err(lineno, format!("bad timestamp `{ts}`")))?;
        let kw: f32 = kw
            .trim()
            .parse()
            .map_err(|_| csv_err(lineno, format!("bad power value `{kw}`")))?;
        if !kw.is_finite() {
            return Err(csv_err(lineno, format!("non-finite power `{kw}`")));
        }
        if kw < 0.0 {
            return Err(csv_err(lineno, format!("negative power {kw} kW")));
        }
        rows.push((ts, kw, lineno));
    }
    rows.sort_by_key(|r| r.0);
    if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(csv_err(
            w[1].2,
            format!("duplicate timestamp {} (also on line {})", format_timestamp(w[1].0), w[0].2),
        ));
    }
    PowerSeries::new(
        rows.iter().map(|r| r.0).collect(),
        rows.iter().map(|r| r.1).collect(),
    )
}

pub fn write_power_csv(path: &Path, series: &PowerSeries) -> Result<()> {
    let mut out = String::with_capacity(series.len() * 32 + 32);
    out.push_str("timestamp,power_kw\n");
    for (t, v) in series.timestamps.iter().zip(&series.values) {
        out.push_str(&format_timestamp(*t));
        out.push(',');
        out.push_str(&v.to_string());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parses the `YYYYMMDDHHMMSS.ppm` naming convention.
pub fn timestamp_from_image_name(path: &Path) -> Result<i64> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default()
        .to_string();
    let stem = name
        .strip_suffix(".ppm")
        .ok_or_else(|| Error::BadImageName(name.clone()))?;
    if stem.len() != 14 || !stem.bytes().all(|b| b.is_ascii_digit()) {
        return Err(Error::BadImageName(name));
    }
    NaiveDateTime::parse_from_str(stem, "%Y%m%d%H%M%S")
        .map(|t| t.and_utc().timestamp())
        .map_err(|_| Error::BadImageName(name))
}

pub fn image_file_name(epoch: i64) -> String {
    DateTime::from_timestamp(epoch, 0)
        .map(|t| t.format("%Y%m%d%H%M%S.ppm").to_string())
        .unwrap_or_else(|| format!("{epoch}.ppm"))
}

/// Decodes binary P6 bytes into `(width, height, rgb)`.
pub fn decode_ppm_bytes(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    if bytes.len() < 2 {
        return Err(Error::PpmHeader("file shorter than magic".into()));
    }
    if &bytes[..2] != b"P6" {
        return Err(Error::UnsupportedMagic(String::from_utf8_lossy(&bytes[..2]).into_owned()));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            let name = ["width", "height", "maxval"][i];
            return Err(Error::PpmHeader(format!("missing {name}")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::PpmHeader("numeric field overflow".into()))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::UnsupportedMaxval(maxval));
    }
    if width == 0 || height == 0 {
        return Err(Error::PpmHeader(format!("degenerate size {width}x{height}")));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::PpmHeader("missing separator after maxval".into())),
    }
    let expected = width as usize * height as usize * 3;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    Ok((width as usize, height as usize, payload[..expected].to_vec()))
}

pub fn decode_ppm(path: &Path) -> Result<SkyImage> {
    let timestamp = timestamp_from_image_name(path)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (width, height, pixels) = decode_ppm_bytes(&bytes)?;
    SkyImage::new(width, height, pixels, timestamp)
}

/// Keeps every second sample starting from the first.
pub fn resample_2min(series: &PowerSeries) -> PowerSeries {
    PowerSeries {
        timestamps: series.timestamps.iter().step_by(2).copied().collect(),
        values: series.values.iter().step_by(2).copied().collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOptions {
    pub horizon_steps: usize,
    pub cadence_s: i64,
    /// Plant capacity used by the night filter; the series maximum when unset.
    pub capacity_kw: Option<f32>,
    /// Windows whose every value is below this fraction of capacity are dropped.
    pub night_fraction: f32,
    /// Accepted image/anchor timestamp offset. Zero means exact match.
    pub time_tolerance_s: i64,
    pub images_per_sample: usize,
    /// Steps between consecutive frames of one sample.
    pub frame_stride: usize,
}

impl SampleOptions {
    pub fn new(horizon_steps: usize) -> Self {
        Self {
            horizon_steps,
            cadence_s: RESAMPLED_CADENCE_S,
            capacity_kw: None,
            night_fraction: 0.01,
            time_tolerance_s: 0,
            images_per_sample: 1,
            frame_stride: 1,
        }
    }

    pub fn input_len(&self) -> usize {
        2 * self.horizon_steps
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BuildStats {
    pub emitted: usize,
    pub dropped_no_image: usize,
    pub dropped_gap: usize,
    pub dropped_night: usize,
}

struct ImageIndex<'a> {
    by_time: HashMap<i64, &'a SkyImage>,
    sorted: Vec<(i64, &'a SkyImage)>,
    tolerance: i64,
}

impl<'a> ImageIndex<'a> {
    fn new(images: &'a [SkyImage], tolerance: i64) -> Self {
        let mut sorted: Vec<_> = images.iter().map(|i| (i.timestamp, i)).collect();
        sorted.sort_by_key(|p| p.0);
        Self {
            by_time: images.iter().map(|i| (i.timestamp, i)).collect(),
            sorted,
            tolerance,
        }
    }

    fn find(&self, t: i64) -> Option<&'a SkyImage> {
        if let Some(img) = self.by_time.get(&t) {
            return Some(img);
        }
        if self.tolerance <= 0 {
            return None;
        }
        let idx = self.sorted.partition_point(|p| p.0 < t);
        let candidates = [idx.checked_sub(1), Some(idx)];
        candidates
            .into_iter()
            .flatten()
            .filter_map(|i| self.sorted.get(i))
            .filter(|p| (p.0 - t).abs() <= self.tolerance)
            .min_by_key(|p| ((p.0 - t).abs(), p.0))
            .map(|p| p.1)
    }
}

/// Aligns input windows, targets and sky images.
///
/// Anchor index `i` yields input `[i - L, i)`, target `[i, i + H)` and the image
/// taken at the last input step. Windows that straddle a gap in the series,
/// lack an image, or lie entirely below the night threshold are dropped.
pub fn build_samples(
    power: &PowerSeries,
    images: &[SkyImage],
    opts: &SampleOptions,
) -> Result<(Vec<SampleRecord>, BuildStats)> {
    if ![10, 20, 30].contains(&opts.horizon_steps) {
        return Err(Error::InvalidArgument(format!(
            "horizon must be 10, 20 or 30 steps, got {}",
            opts.horizon_steps
        )));
    }
    build_samples_unchecked(power, images, opts)
}

/// [`build_samples`] without the horizon whitelist, for small fixtures.
pub fn build_samples_unchecked(
    power: &PowerSeries,
    images: &[SkyImage],
    opts: &SampleOptions,
) -> Result<(Vec<SampleRecord>, BuildStats)> {
    let h = opts.horizon_steps;
    let l = opts.input_len();
    if h == 0 || opts.images_per_sample == 0 || opts.frame_stride == 0 {
        return Err(Error::InvalidArgument("horizon, image count and frame stride must be positive".into()));
    }
    let n = power.len();
    let capacity = opts
        .capacity_kw
        .unwrap_or_else(|| power.values.iter().copied().fold(0.0, f32::max));
    let night_level = capacity * opts.night_fraction;
    let index = ImageIndex::new(images, opts.time_tolerance_s);
    let span = (l + h - 1) as i64 * opts.cadence_s;

    let mut stats = BuildStats::default();
    let mut out = Vec::new();
    if n >= l + h {
        for i in l..=n - h {
            let ts = &power.timestamps;
            if ts[i + h - 1] - ts[i - l] != span {
                stats.dropped_gap += 1;
                continue;
            }
            let input = &power.values[i - l..i];
            if input.iter().all(|&v| v < night_level) {
                stats.dropped_night += 1;
                continue;
            }
            let anchor = ts[i - 1];
            let frames: Option<Vec<SkyImage>> = (0..opts.images_per_sample)
                .rev()
                .map(|k| index.find(anchor - (k * opts.frame_stride) as i64 * opts.cadence_s).cloned())
                .collect();
            let Some(mut frames) = frames else {
                stats.dropped_no_image += 1;
                continue;
            };
            if let Some(last) = frames.last_mut() {
                // record the anchor as the frame time when a tolerance was used
                last.timestamp = anchor;
            }
            out.push(SampleRecord {
                input_window: input.to_vec(),
                target: power.values[i..i + h].to_vec(),
                images: frames,
                anchor_time: anchor,
                cadence_s: opts.cadence_s,
            });
        }
    }
    stats.emitted = out.len();
    if out.is_empty() {
        return Err(Error::NoAlignableSamples {
            dropped_no_image: stats.dropped_no_image,
            dropped_gap: stats.dropped_gap,
            dropped_night: stats.dropped_night,
        });
    }
    Ok((out, stats))
}

/// First `floor(0.7 n)` samples train, next `floor(0.1 n)` validate, rest test.
pub fn split_chronological(mut samples: Vec<SampleRecord>) -> Result<DatasetSplit> {
    let n = samples.len();
    if n < 10 {
        return Err(Error::TooFewSamples { need: 10, got: n });
    }
    samples.sort_by_key(|s| s.anchor_time);
    let n_train = n * 7 / 10;
    let n_val = n / 10;
    let test = samples.split_off(n_train + n_val);
    let val = samples.split_off(n_train);
    Ok(DatasetSplit {
        train: samples,
        val,
        test,
    })
}

/// Dataset root: `power.csv` plus `images/*.ppm`.
pub struct DatasetLayout {
    pub root: PathBuf,
}

impl DatasetLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn power_csv(&self) -> PathBuf {
        self.root.join("power.csv")
    }

    pub fn images_dir(&self) -> PathBuf {
        self.root.join("images")
    }

    pub fn load(&self) -> Result<(PowerSeries, Vec<SkyImage>)> {
        let power = load_power_csv(&self.power_csv())?;
        let dir = self.images_dir();
        let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
            .collect();
        paths.sort();
        let images = paths.iter().map(|p| decode_ppm(p)).collect::<Result<Vec<_>>>()?;
        Ok((power, images))
    }
}
