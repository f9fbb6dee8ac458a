//! Image normalisation, masking units and pixel-level masking.
//!
//! An image of `H×W` pixels is tiled by square masking units of edge
//! `α·P`, giving `Q = H·W / (α·P)²` units indexed in raster order. A
//! [`MaskPlan`] selects a subset of those units; [`apply_mask`] fills every
//! pixel of a selected unit with [`ZERO_FILL`].

use std::fmt;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Float, Tensor};

/// Value written into masked pixels. A small positive constant rather than
/// an exact zero.
pub const ZERO_FILL: Float = 1e-6;

/// Channel-first RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<Float>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<Float>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::shape(format!(
                "{} values for a 3x{height}x{width} image",
                data.len()
            )));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [Float; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, height * width));
        }
        Image { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[Float] {
        &self.data
    }

    pub fn pixel(&self, channel: usize, y: usize, x: usize) -> Float {
        self.data[(channel * self.height + y) * self.width + x]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [Float; 3]) {
        let plane = self.height * self.width;
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[c * plane + y * self.width + x] = v;
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([3, self.height, self.width], self.data.clone()).expect("consistent image")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [3, h, w] => Image::new(h, w, t.data().to_vec()),
            ref s => Err(Error::shape(format!("expected a 3xHxW tensor, got {s:?}"))),
        }
    }

    /// Channel-last 8-bit pixels, rounding and clamping to `[0, 255]`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let plane = self.height * self.width;
        let mut out = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for c in 0..3 {
                let v = (self.data[c * plane + i] * 255.0).round().clamp(0.0, 255.0);
                out.push(v as u8);
            }
        }
        out
    }

    /// Nearest-neighbour resize.
    pub fn resize(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = Image::filled(height, width, [0.0; 3]);
        for y in 0..height {
            let sy = y * self.height / height;
            for x in 0..width {
                let sx = x * self.width / width;
                out.set_pixel(y, x, [0, 1, 2].map(|c| self.pixel(c, sy, sx)));
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let img_err = |e: png::EncodingError| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        };
        let mut writer = enc.write_header().map_err(img_err)?;
        writer.write_image_data(&self.to_bytes()).map_err(img_err)?;
        writer.finish().map_err(img_err)
    }

    /// Loads an 8-bit RGB or RGBA PNG (alpha is dropped).
    pub fn load_png(path: &Path) -> Result<Self> {
        let img_err = |msg: String| Error::Image {
            path: path.to_path_buf(),
            msg,
        };
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let decoder = png::Decoder::new(std::io::BufReader::new(file));
        let mut reader = decoder.read_info().map_err(|e| img_err(e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| img_err("image too large".into()))?];
        let info = reader.next_frame(&mut buf).map_err(|e| img_err(e.to_string()))?;
        if info.bit_depth != png::BitDepth::Eight {
            return Err(img_err(format!("unsupported bit depth {:?}", info.bit_depth)));
        }
        let (h, w) = (info.height as usize, info.width as usize);
        let bytes = &buf[..info.buffer_size()];
        match info.color_type {
            png::ColorType::Rgb => normalize(bytes, h, w, 3),
            png::ColorType::Rgba => {
                let rgb: Vec<u8> = bytes
                    .chunks_exact(4)
                    .flat_map(|p| [p[0], p[1], p[2]])
                    .collect();
                normalize(&rgb, h, w, 3)
            }
            other => Err(img_err(format!("unsupported color type {other:?}"))),
        }
    }
}

/// Scales channel-last 8-bit pixels to `[0, 1]` channel-first floats.
pub fn normalize(raw: &[u8], height: usize, width: usize, channels: usize) -> Result<Image> {
    if channels != 3 {
        return Err(Error::shape(format!("expected 3 channels, got {channels}")));
    }
    if raw.len() != height * width * 3 {
        return Err(Error::shape(format!(
            "{} bytes for a {height}x{width}x3 image",
            raw.len()
        )));
    }
    let plane = height * width;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = Float::from(px[c]) / 255.0;
        }
    }
    Image::new(height, width, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskStyle {
    RandomGrid,
    Grid,
    Stroke,
    Center,
}

impl MaskStyle {
    pub const ALL: [MaskStyle; 4] = [
        MaskStyle::RandomGrid,
        MaskStyle::Grid,
        MaskStyle::Stroke,
        MaskStyle::Center,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MaskStyle::RandomGrid => "random-grid",
            MaskStyle::Grid => "grid",
            MaskStyle::Stroke => "stroke",
            MaskStyle::Center => "center",
        }
    }
}

impl fmt::Display for MaskStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaskStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MaskStyle::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown masking style {s:?}")))
    }
}

/// Selected masking units of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub alpha: usize,
    pub patch: usize,
    pub height: usize,
    pub width: usize,
    pub style: MaskStyle,
    /// Requested fraction of units.
    pub ratio: f64,
    /// Sorted, distinct unit indices in `[0, Q)`, raster order.
    pub units: Vec<usize>,
}

impl MaskPlan {
    /// Edge length of one unit in pixels, `α·P`.
    pub fn unit_edge(&self) -> usize {
        self.alpha * self.patch
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.unit_edge(), self.width / self.unit_edge())
    }

    /// Total number of masking units `Q`.
    pub fn unit_count(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn achieved_ratio(&self) -> f64 {
        self.units.len() as f64 / self.unit_count() as f64
    }

    /// Per-pixel mask, row-major `H×W`.
    pub fn pixel_mask(&self) -> Vec<bool> {
        let e = self.unit_edge();
        let (_, gw) = self.grid();
        let mut out = vec![false; self.height * self.width];
        for &u in &self.units {
            let (uy, ux) = (u / gw, u % gw);
            for y in uy * e..(uy + 1) * e {
                out[y * self.width + ux * e..y * self.width + (ux + 1) * e].fill(true);
            }
        }
        out
    }

    /// `alpha P Q style` header line, then one unit index per line.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{} {} {} {}\n",
            self.alpha,
            self.patch,
            self.unit_count(),
            self.style
        );
        for u in &self.units {
            s.push_str(&format!("{u}\n"));
        }
        s
    }

    /// Parses [`MaskPlan::to_text`] output for a square `size×size` image.
    pub fn from_text(text: &str, size: usize) -> Result<Self> {
        let mut lines = text.lines();
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| Error::invalid("empty mask plan"))?
            .split_whitespace()
            .collect();
        let [alpha, patch, q, style] = header[..] else {
            return Err(Error::invalid("mask plan header must be `alpha P Q style`"));
        };
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::invalid(format!("bad number {s:?} in mask plan")))
        };
        let (alpha, patch, q) = (num(alpha)?, num(patch)?, num(q)?);
        let style: MaskStyle = style.parse()?;
        let units = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| num(l.trim()))
            .collect::<Result<Vec<_>>>()?;
        let plan = MaskPlan {
            alpha,
            patch,
            height: size,
            width: size,
            style,
            ratio: 0.0,
            units,
        };
        check_grid(size, size, patch, alpha)?;
        if plan.unit_count() != q {
            return Err(Error::invalid(format!(
                "header says Q={q} but a {size}px image has {} units",
                plan.unit_count()
            )));
        }
        if plan.units.windows(2).any(|w| w[0] >= w[1]) || plan.units.iter().any(|&u| u >= q) {
            return Err(Error::invalid("unit indices must be sorted, distinct and below Q"));
        }
        Ok(MaskPlan {
            ratio: plan.achieved_ratio(),
            ..plan
        })
    }
}

fn check_grid(height: usize, width: usize, patch: usize, alpha: usize) -> Result<usize> {
    let edge = alpha * patch;
    if edge == 0 || !height.is_multiple_of(edge) || !width.is_multiple_of(edge) {
        return Err(Error::shape(format!(
            "{height}x{width} image cannot be tiled by {edge}px masking units (alpha={alpha}, P={patch})"
        )));
    }
    Ok(edge)
}

/// Number of units a ratio asks for, `round(r·Q)`.
pub fn unit_budget(ratio: f64, q: usize) -> usize {
    ((ratio * q as f64).round() as usize).min(q)
}

pub fn make_mask_plan(
    height: usize,
    width: usize,
    patch: usize,
    alpha: usize,
    ratio: f64,
    style: MaskStyle,
    rng: &mut Rng,
) -> Result<MaskPlan> {
    let edge = check_grid(height, width, patch, alpha)?;
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::invalid(format!("image mask ratio {ratio} outside [0, 1]")));
    }
    let (gh, gw) = (height / edge, width / edge);
    let q = gh * gw;
    let budget = unit_budget(ratio, q);
    let mut units = match style {
        MaskStyle::RandomGrid => index::sample(rng, q, budget).into_vec(),
        MaskStyle::Grid => checkerboard(gh, gw, budget),
        MaskStyle::Center => center_block(gh, gw, budget),
        MaskStyle::Stroke => stroke(gh, gw, budget, rng),
    };
    units.sort_unstable();
    Ok(MaskPlan {
        alpha,
        patch,
        height,
        width,
        style,
        ratio,
        units,
    })
}

/// Evenly spaced picks from the checkerboard's dark cells first, then from
/// the light cells. Half the units give the exact checkerboard.
fn checkerboard(gh: usize, gw: usize, budget: usize) -> Vec<usize> {
    let (dark, light): (Vec<usize>, Vec<usize>) =
        (0..gh * gw).partition(|&u| (u / gw + u % gw).is_multiple_of(2));
    let spread = |cells: &[usize], n: usize| -> Vec<usize> {
        (0..n).map(|i| cells[i * cells.len() / n]).collect()
    };
    if budget <= dark.len() {
        spread(&dark, budget)
    } else {
        let mut out = dark.clone();
        out.extend(spread(&light, budget - dark.len()));
        out
    }
}

/// The largest centred square of units whose area does not exceed the
/// budget `round(r·Q)`.
fn center_block(gh: usize, gw: usize, budget: usize) -> Vec<usize> {
    let mut side = 0;
    while (side + 1) * (side + 1) <= budget && side < gh.min(gw) {
        side += 1;
    }
    let (oy, ox) = ((gh - side) / 2, (gw - side) / 2);
    let mut out = Vec::with_capacity(side * side);
    for y in oy..oy + side {
        for x in ox..ox + side {
            out.push(y * gw + x);
        }
    }
    out
}

/// Self-avoiding 4-connected random walk over the unit grid. When the walk
/// is boxed in it resumes from a visited unit that still has a free
/// neighbour, so the band stays connected until the budget is spent.
fn stroke(gh: usize, gw: usize, budget: usize, rng: &mut Rng) -> Vec<usize> {
    const KEEP_DIRECTION: f64 = 0.6;
    if budget == 0 {
        return Vec::new();
    }
    let neighbours = |u: usize| -> [Option<usize>; 4] {
        let (y, x) = (u / gw, u % gw);
        [
            (y > 0).then(|| u - gw),
            (x + 1 < gw).then(|| u + 1),
            (y + 1 < gh).then(|| u + gw),
            (x > 0).then(|| u - 1),
        ]
    };
    let mut visited = vec![false; gh * gw];
    let mut path = Vec::with_capacity(budget);
    let mut current = rng.gen_range(0..gh * gw);
    let mut direction = rng.gen_range(0..4);
    visited[current] = true;
    path.push(current);
    while path.len() < budget {
        let free: Vec<usize> = (0..4)
            .filter(|&d| neighbours(current)[d].is_some_and(|n| !visited[n]))
            .collect();
        if free.is_empty() {
            let frontier: Vec<usize> = path
                .iter()
                .copied()
                .filter(|&u| neighbours(u).iter().flatten().any(|&n| !visited[n]))
                .collect();
            current = frontier[rng.gen_range(0..frontier.len())];
            continue;
        }
        if !(free.contains(&direction) && rng.gen_bool(KEEP_DIRECTION)) {
            direction = free[rng.gen_range(0..free.len())];
        }
        current = neighbours(current)[direction].expect("free direction");
        visited[current] = true;
        path.push(current);
    }
    path
}

/// Fills every pixel of every selected unit with [`ZERO_FILL`] in all
/// channels; other pixels are copied unchanged.
pub fn apply_mask(img: &Image, plan: &MaskPlan) -> Result<Image> {
    if img.height != plan.height || img.width != plan.width {
        return Err(Error::shape(format!(
            "mask plan for {}x{} applied to a {}x{} image",
            plan.height, plan.width, img.height, img.width
        )));
    }
    let mask = plan.pixel_mask();
    let plane = img.height * img.width;
    let mut out = img.clone();
    for c in 0..3 {
        for (i, &m) in mask.iter().enumerate() {
            if m {
                out.data[c * plane + i] = ZERO_FILL;
            }
        }
    }
    Ok(out)
}
