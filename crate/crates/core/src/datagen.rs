//! Procedural text images rendered from a built-in 5×7 bitmap font.
//!
//! Every sample is a pure function of its seed and the [`RenderConfig`].
//! Split datasets derive one seed per `(split_seed, split, index)` so any
//! subset can be regenerated independently of the others.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{parse_bool, parse_value};
use crate::vocab::Vocab;
use crate::{Error, Result};

pub const GLYPH_WIDTH: usize = 5;
pub const GLYPH_HEIGHT: usize = 7;

/// Rows top to bottom; bit 4 is the leftmost column. Order follows
/// [`Vocab`] indices.
const FONT: [[u8; GLYPH_HEIGHT]; 36] = [
    [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E], // 0
    [0x04, 0x0C, 0x14, 0x04, 0x04, 0x04, 0x1F], // 1
    [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F], // 2
    [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E], // 3
    [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02], // 4
    [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E], // 5
    [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E], // 6
    [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08], // 7
    [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E], // 8
    [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C], // 9
    [0x00, 0x00, 0x0E, 0x01, 0x0F, 0x11, 0x0F], // a
    [0x10, 0x10, 0x16, 0x19, 0x11, 0x11, 0x1E], // b
    [0x00, 0x00, 0x0E, 0x10, 0x10, 0x11, 0x0E], // c
    [0x01, 0x01, 0x0D, 0x13, 0x11, 0x11, 0x0F], // d
    [0x00, 0x00, 0x0E, 0x11, 0x1F, 0x10, 0x0E], // e
    [0x06, 0x09, 0x08, 0x1C, 0x08, 0x08, 0x08], // f
    [0x00, 0x0F, 0x11, 0x11, 0x0F, 0x01, 0x0E], // g
    [0x10, 0x10, 0x16, 0x19, 0x11, 0x11, 0x11], // h
    [0x04, 0x00, 0x0C, 0x04, 0x04, 0x04, 0x0E], // i
    [0x02, 0x00, 0x06, 0x02, 0x02, 0x12, 0x0C], // j
    [0x10, 0x10, 0x12, 0x14, 0x18, 0x14, 0x12], // k
    [0x08, 0x08, 0x08, 0x08, 0x08, 0x08, 0x06], // l
    [0x00, 0x00, 0x1A, 0x15, 0x15, 0x11, 0x11], // m
    [0x00, 0x00, 0x16, 0x19, 0x11, 0x11, 0x11], // n
    [0x00, 0x00, 0x0E, 0x11, 0x11, 0x11, 0x0E], // o
    [0x00, 0x00, 0x1E, 0x11, 0x1E, 0x10, 0x10], // p
    [0x00, 0x00, 0x0D, 0x13, 0x0F, 0x01, 0x01], // q
    [0x00, 0x00, 0x16, 0x19, 0x10, 0x10, 0x10], // r
    [0x00, 0x00, 0x0E, 0x10, 0x0E, 0x01, 0x1E], // s
    [0x08, 0x08, 0x1C, 0x08, 0x08, 0x09, 0x06], // t
    [0x00, 0x00, 0x11, 0x11, 0x11, 0x13, 0x0D], // u
    [0x00, 0x00, 0x11, 0x11, 0x11, 0x0A, 0x04], // v
    [0x00, 0x00, 0x11, 0x11, 0x15, 0x15, 0x0A], // w
    [0x00, 0x00, 0x11, 0x0A, 0x04, 0x0A, 0x11], // x
    [0x00, 0x00, 0x11, 0x11, 0x0F, 0x01, 0x0E], // y
    [0x00, 0x00, 0x1F, 0x02, 0x04, 0x08, 0x1F], // z
];

/// Whether font cell `(row, col)` of character index `index` is inked.
pub fn glyph_pixel(index: usize, row: usize, col: usize) -> bool {
    FONT[index][row] >> (GLYPH_WIDTH - 1 - col) & 1 == 1
}

/// Rendering parameters. Words start `margin` px from the left edge (or
/// anywhere that fits with `position_jitter`); zero jitter and slope give
/// a fixed pitch of `scale·5 + gap`.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderConfig {
    pub scale: usize,
    pub gap: usize,
    /// Per-gap horizontal jitter, uniform in `±spacing_jitter` px.
    pub spacing_jitter: usize,
    /// Per-glyph vertical jitter, uniform in `±vertical_jitter` px.
    pub vertical_jitter: usize,
    /// Baseline slope drawn uniformly from `±max_slope`.
    pub max_slope: f64,
    pub margin: usize,
    /// Random horizontal placement of the whole word.
    pub position_jitter: bool,
    pub noise_sigma: f64,
    pub background_min: f64,
    pub background_max: f64,
    pub min_label_len: usize,
    pub max_label_len: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            scale: 2,
            gap: 1,
            spacing_jitter: 1,
            vertical_jitter: 2,
            max_slope: 0.04,
            margin: 4,
            position_jitter: false,
            noise_sigma: 0.05,
            background_min: 0.0,
            background_max: 0.4,
            min_label_len: 1,
            max_label_len: 10,
        }
    }
}

impl RenderConfig {
    /// No jitter, slope or noise.
    pub fn clean() -> Self {
        RenderConfig {
            spacing_jitter: 0,
            vertical_jitter: 0,
            max_slope: 0.0,
            position_jitter: false,
            noise_sigma: 0.0,
            ..Self::default()
        }
    }

    pub fn glyph_width(&self) -> usize {
        GLYPH_WIDTH * self.scale
    }

    pub fn glyph_height(&self) -> usize {
        GLYPH_HEIGHT * self.scale
    }

    /// Widest possible word in pixels.
    pub fn max_word_width(&self) -> usize {
        let n = self.max_label_len;
        n * self.glyph_width() + (n - 1) * (self.gap + self.spacing_jitter)
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.scale == 0 || self.min_label_len == 0 || self.min_label_len > self.max_label_len {
            return Err(Error::config(
                "scale and label lengths must satisfy 1 ≤ min_label_len ≤ max_label_len",
            ));
        }
        if self.spacing_jitter > self.gap {
            return Err(Error::config("spacing_jitter may not exceed gap"));
        }
        if self.margin + self.max_word_width() > width {
            return Err(Error::config(format!(
                "{} glyphs need {} px but the image is {width} px wide",
                self.max_label_len,
                self.max_word_width()
            )));
        }
        let drift = (self.max_slope * self.max_word_width() as f64 / 2.0).ceil() as usize;
        if self.glyph_height() + 2 * (self.vertical_jitter + drift) > height {
            return Err(Error::config(format!(
                "glyphs with jitter and slope do not fit {height} px"
            )));
        }
        let ok = |v: f64| (0.0..=1.0).contains(&v);
        if !ok(self.background_min)
            || !ok(self.background_max)
            || self.background_min > self.background_max
        {
            return Err(Error::config("background range must lie in [0,1]"));
        }
        if !(self.noise_sigma >= 0.0 && self.max_slope >= 0.0) {
            return Err(Error::config(
                "noise_sigma and max_slope must be nonnegative",
            ));
        }
        Ok(())
    }

    pub(crate) fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "glyph_scale" => self.scale = parse_value(key, value)?,
            "glyph_gap" => self.gap = parse_value(key, value)?,
            "spacing_jitter" => self.spacing_jitter = parse_value(key, value)?,
            "vertical_jitter" => self.vertical_jitter = parse_value(key, value)?,
            "max_slope" => self.max_slope = parse_value(key, value)?,
            "margin" => self.margin = parse_value(key, value)?,
            "position_jitter" => self.position_jitter = parse_bool(key, value)?,
            "noise_sigma" => self.noise_sigma = parse_value(key, value)?,
            "background_min" => self.background_min = parse_value(key, value)?,
            "background_max" => self.background_max = parse_value(key, value)?,
            "min_label_len" => self.min_label_len = parse_value(key, value)?,
            "max_label_len" => self.max_label_len = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub(crate) fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("glyph_scale", self.scale.to_string()),
            ("glyph_gap", self.gap.to_string()),
            ("spacing_jitter", self.spacing_jitter.to_string()),
            ("vertical_jitter", self.vertical_jitter.to_string()),
            ("max_slope", self.max_slope.to_string()),
            ("margin", self.margin.to_string()),
            ("position_jitter", self.position_jitter.to_string()),
            ("noise_sigma", self.noise_sigma.to_string()),
            ("background_min", self.background_min.to_string()),
            ("background_max", self.background_max.to_string()),
            ("min_label_len", self.min_label_len.to_string()),
            ("max_label_len", self.max_label_len.to_string()),
        ]
    }
}

/// One grayscale text image, row-major, 0 = black.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
    pub label: String,
    /// Generation seed; `None` for samples read from disk.
    pub seed: Option<u64>,
}

impl Sample {
    /// Pixel values scaled into `[0, 1]`.
    pub fn image(&self) -> Vec<f32> {
        self.pixels.iter().map(|&p| p as f32 / 255.0).collect()
    }

    pub fn label_len(&self) -> usize {
        self.label.chars().count()
    }
}

/// Glyph placement chosen by the renderer; exposed for layout-aware tests.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    /// `(left, top)` of each glyph's scaled cell block.
    pub origins: Vec<(usize, usize)>,
    pub background: f64,
    pub ink: f64,
}

pub fn render_sample(
    seed: u64,
    config: &RenderConfig,
    height: usize,
    width: usize,
) -> Result<Sample> {
    render_with_layout(seed, config, height, width).map(|(s, _)| s)
}

pub fn render_with_layout(
    seed: u64,
    config: &RenderConfig,
    height: usize,
    width: usize,
) -> Result<(Sample, Layout)> {
    config.validate(height, width)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let label = draw_label(&mut rng, config);
    render_text(&mut rng, &label, config, height, width).map(|(pixels, layout)| {
        (
            Sample {
                height,
                width,
                pixels,
                label,
                seed: Some(seed),
            },
            layout,
        )
    })
}

fn draw_label(rng: &mut ChaCha8Rng, config: &RenderConfig) -> String {
    let len = rng.gen_range(config.min_label_len..=config.max_label_len);
    let chars: Vec<usize> = (0..len).map(|_| rng.gen_range(0..FONT.len())).collect();
    Vocab.decode(&chars)
}

/// The label [`render_sample`] draws for `seed`, without rendering.
pub fn sample_label(seed: u64, config: &RenderConfig) -> String {
    draw_label(&mut ChaCha8Rng::seed_from_u64(seed), config)
}

fn jitter(rng: &mut ChaCha8Rng, amount: usize) -> isize {
    if amount == 0 {
        0
    } else {
        rng.gen_range(-(amount as isize)..=amount as isize)
    }
}

fn render_text(
    rng: &mut ChaCha8Rng,
    label: &str,
    config: &RenderConfig,
    height: usize,
    width: usize,
) -> Result<(Vec<u8>, Layout)> {
    let tokens = Vocab.encode(label)?;
    let (gw, gh) = (config.glyph_width(), config.glyph_height());
    let gaps: Vec<usize> = (1..tokens.len())
        .map(|_| (config.gap as isize + jitter(rng, config.spacing_jitter)) as usize)
        .collect();
    let word = tokens.len() * gw + gaps.iter().sum::<usize>();
    let left = if config.position_jitter {
        rng.gen_range(0..=width - word)
    } else {
        config.margin
    };
    let slope = if config.max_slope > 0.0 {
        rng.gen_range(-config.max_slope..=config.max_slope)
    } else {
        0.0
    };
    let mid = (height - gh) as f64 / 2.0;
    let center = left as f64 + word as f64 / 2.0;
    let mut origins = Vec::with_capacity(tokens.len());
    let mut x = left;
    for (i, _) in tokens.iter().enumerate() {
        let drift = slope * (x as f64 + gw as f64 / 2.0 - center);
        let top = (mid + drift).round() as isize + jitter(rng, config.vertical_jitter);
        origins.push((x, top.clamp(0, (height - gh) as isize) as usize));
        x += gw + gaps.get(i).copied().unwrap_or(0);
    }
    let background = rng.gen_range(config.background_min..=config.background_max);
    let ink = rng.gen_range(0.75..=1.0);
    let mut image = vec![background; height * width];
    for (&tok, &(ox, oy)) in tokens.iter().zip(&origins) {
        for r in 0..gh {
            for c in 0..gw {
                if glyph_pixel(tok, r / config.scale, c / config.scale) {
                    image[(oy + r) * width + ox + c] = ink;
                }
            }
        }
    }
    if config.noise_sigma > 0.0 {
        let normal =
            Normal::new(0.0, config.noise_sigma).map_err(|e| Error::config(e.to_string()))?;
        for v in &mut image {
            *v += normal.sample(rng);
        }
    }
    let pixels = image
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok((
        pixels,
        Layout {
            origins,
            background,
            ink,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of sample `index` in `split`.
pub fn sample_seed(split_seed: u64, split: Split, index: usize) -> u64 {
    mix(mix(mix(split_seed) ^ split.tag()) ^ index as u64)
}

/// Renders `count` samples of one split in memory.
pub fn generate(
    split_seed: u64,
    split: Split,
    count: usize,
    config: &RenderConfig,
    height: usize,
    width: usize,
) -> Result<Vec<Sample>> {
    (0..count)
        .map(|i| render_sample(sample_seed(split_seed, split, i), config, height, width))
        .collect()
}

/// Sample counts of the three splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

pub const INDEX_FILE: &str = "index.tsv";

/// Writes `<dir>/<split>/<split>_NNNNNN.pgm` plus `<dir>/<split>/index.tsv`.
pub fn gen_dataset(
    dir: &Path,
    counts: SplitCounts,
    split_seed: u64,
    config: &RenderConfig,
    height: usize,
    width: usize,
) -> Result<()> {
    if counts.total() == 0 {
        return Err(Error::config("dataset needs at least one sample"));
    }
    config.validate(height, width)?;
    for split in Split::ALL {
        let sub = dir.join(split.name());
        fs::create_dir_all(&sub)?;
        let mut index = String::new();
        for i in 0..counts.get(split) {
            let sample = render_sample(sample_seed(split_seed, split, i), config, height, width)?;
            let name = format!("{}_{i:06}.pgm", split.name());
            write_pgm(&sub.join(&name), &sample)?;
            let _ = writeln!(index, "{name}\t{}", sample.label);
        }
        fs::write(sub.join(INDEX_FILE), index)?;
    }
    Ok(())
}

/// Binary graymap, maxval 255.
pub fn encode_pgm(sample: &Sample) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", sample.width, sample.height).into_bytes();
    out.extend_from_slice(&sample.pixels);
    out
}

pub fn write_pgm(path: &Path, sample: &Sample) -> io::Result<()> {
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    f.write_all(&encode_pgm(sample))?;
    f.flush()
}

/// Parses a binary graymap with maxval 255; `#` comments are allowed in
/// the header.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::data("truncated graymap header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(Error::data(format!(
            "expected P5 with maxval 255, got {} / {}",
            fields[0], fields[3]
        )));
    }
    let dim = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::data(format!("bad graymap extent {s:?}")))
    };
    let (width, height) = (dim(&fields[1])?, dim(&fields[2])?);
    // Exactly one whitespace byte separates the header from the raster.
    let data = bytes.get(pos + 1..).unwrap_or_default();
    if data.len() != width * height {
        return Err(Error::data(format!(
            "graymap raster has {} bytes, expected {}",
            data.len(),
            width * height
        )));
    }
    Ok((width, height, data.to_vec()))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    decode_pgm(&fs::read(path)?).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

/// Parses `filename<TAB>label` lines.
pub fn parse_index(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, line)| {
            let (file, label) = line
                .split_once('\t')
                .ok_or_else(|| Error::data(format!("index line {}: missing tab", n + 1)))?;
            Vocab.encode(label)?;
            Ok((file.to_string(), label.to_string()))
        })
        .collect()
}

/// Loads one split written by [`gen_dataset`].
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<Sample>> {
    load_dir(&dir.join(split.name()))
}

/// Loads every image listed in `<dir>/index.tsv`.
pub fn load_dir(dir: &Path) -> Result<Vec<Sample>> {
    let index_path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&index_path)
        .map_err(|e| Error::data(format!("{}: {e}", index_path.display())))?;
    parse_index(&text)?
        .into_iter()
        .map(|(file, label)| {
            let path: PathBuf = dir.join(file);
            let (width, height, pixels) = read_pgm(&path)?;
            Ok(Sample {
                height,
                width,
                pixels,
                label,
                seed: None,
            })
        })
        .collect()
}
