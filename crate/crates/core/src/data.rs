//! Product datasets: manifest ingestion and a synthetic generator of
//! attribute-tagged product images.
//!
//! A manifest is UTF-8 text with one product per line:
//! `product_id<TAB>img1,img2<TAB>caption<TAB>main_cat<TAB>sub_cat`.
//! Relative image paths resolve against the manifest's directory.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::Float;
use crate::vision::{normalize, Image};

pub const MAX_VIEWS: usize = 6;
pub const MANIFEST_NAME: &str = "manifest.tsv";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProductRecord {
    pub id: String,
    pub images: Vec<PathBuf>,
    pub caption: String,
    pub main_cat: String,
    pub sub_cat: String,
}

impl ProductRecord {
    pub fn to_line(&self) -> String {
        let images: Vec<String> = self.images.iter().map(|p| p.display().to_string()).collect();
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.id,
            images.join(","),
            self.caption,
            self.main_cat,
            self.sub_cat
        )
    }
}

/// Validated manifest contents with dense category ids.
#[derive(Clone, Debug)]
pub struct Manifest {
    pub records: Vec<ProductRecord>,
    /// Category names sorted lexicographically; the index is the id.
    pub main_names: Vec<String>,
    pub sub_names: Vec<String>,
}

impl Manifest {
    pub fn from_records(records: Vec<ProductRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Dataset("no records".into()));
        }
        let mut ids = BTreeSet::new();
        let mut parent: HashMap<&str, &str> = HashMap::new();
        for r in &records {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Dataset(format!("duplicate product id {:?}", r.id)));
            }
            if let Some(&prev) = parent.get(r.sub_cat.as_str()) {
                if prev != r.main_cat {
                    return Err(Error::Dataset(format!(
                        "sub-category {:?} appears under main categories {prev:?} and {:?}",
                        r.sub_cat, r.main_cat
                    )));
                }
            } else {
                parent.insert(&r.sub_cat, &r.main_cat);
            }
        }
        let names = |f: fn(&ProductRecord) -> &String| {
            records.iter().map(f).cloned().collect::<BTreeSet<_>>().into_iter().collect::<Vec<_>>()
        };
        let main_names = names(|r| &r.main_cat);
        let sub_names = names(|r| &r.sub_cat);
        Ok(Manifest {
            records,
            main_names,
            sub_names,
        })
    }

    pub fn main_id(&self, name: &str) -> Option<usize> {
        self.main_names.binary_search_by(|n| n.as_str().cmp(name)).ok()
    }

    pub fn sub_id(&self, name: &str) -> Option<usize> {
        self.sub_names.binary_search_by(|n| n.as_str().cmp(name)).ok()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&r.to_line());
            s.push('\n');
        }
        s
    }
}

/// Parses manifest text. Paths are kept as written.
pub fn parse_manifest(text: &str, path: &Path) -> Result<Manifest> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(bad(format!("expected 5 tab-separated fields, found {}", fields.len())));
        }
        if let Some(pos) = fields.iter().position(|f| f.trim().is_empty()) {
            let names = ["product id", "image list", "caption", "main category", "sub-category"];
            return Err(bad(format!("empty {}", names[pos])));
        }
        let images: Vec<PathBuf> = fields[1].split(',').map(|p| PathBuf::from(p.trim())).collect();
        if images.len() > MAX_VIEWS || images.iter().any(|p| p.as_os_str().is_empty()) {
            return Err(bad(format!("expected 1 to {MAX_VIEWS} image paths")));
        }
        records.push(ProductRecord {
            id: fields[0].to_string(),
            images,
            caption: fields[2].to_string(),
            main_cat: fields[3].to_string(),
            sub_cat: fields[4].to_string(),
        });
    }
    Manifest::from_records(records)
}

/// Reads and validates a manifest, resolving image paths and checking that
/// each exists.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest = parse_manifest(&text, path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    for r in &mut manifest.records {
        for img in &mut r.images {
            if img.is_relative() {
                *img = base.join(&*img);
            }
            if !img.is_file() {
                return Err(Error::Dataset(format!(
                    "product {}: image {} does not exist",
                    r.id,
                    img.display()
                )));
            }
        }
    }
    log::info!(
        "{}: {} products, {} main categories, {} sub-categories",
        path.display(),
        manifest.records.len(),
        manifest.main_names.len(),
        manifest.sub_names.len()
    );
    Ok(manifest)
}

#[derive(Clone, Debug)]
pub struct Product {
    pub id: String,
    pub caption: String,
    pub main: usize,
    pub sub: usize,
    pub images: Vec<Image>,
}

/// Products with decoded images at a fixed resolution.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub products: Vec<Product>,
    pub main_names: Vec<String>,
    pub sub_names: Vec<String>,
}

impl Dataset {
    /// Decodes every image of the manifest, resizing to `size×size`.
    pub fn from_manifest(manifest: &Manifest, size: usize) -> Result<Self> {
        let products = manifest
            .records
            .par_iter()
            .map(|r| {
                let images = r
                    .images
                    .iter()
                    .map(|p| Image::load_png(p).map(|img| img.resize(size, size)))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Product {
                    id: r.id.clone(),
                    caption: r.caption.clone(),
                    main: manifest.main_id(&r.main_cat).expect("category vocabulary is complete"),
                    sub: manifest.sub_id(&r.sub_cat).expect("category vocabulary is complete"),
                    images,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            products,
            main_names: manifest.main_names.clone(),
            sub_names: manifest.sub_names.clone(),
        })
    }

    pub fn load(path: &Path, size: usize) -> Result<Self> {
        Self::from_manifest(&load_manifest(path)?, size)
    }

    pub fn len(&self) -> usize {
        self.products.len()
    }

    pub fn is_empty(&self) -> bool {
        self.products.is_empty()
    }

    /// `(product, view)` for every image.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.products
            .iter()
            .enumerate()
            .flat_map(|(p, prod)| (0..prod.images.len()).map(move |v| (p, v)))
            .collect()
    }

    pub fn captions(&self) -> Vec<&str> {
        self.products.iter().map(|p| p.caption.as_str()).collect()
    }

    /// Product indices grouped by sub-category.
    pub fn by_sub_category(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, p) in self.products.iter().enumerate() {
            groups.entry(p.sub).or_default().push(i);
        }
        groups
    }
}

/// Attribute axes of the synthetic products.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub shapes: Vec<ShapeKind>,
    pub colors: Vec<(String, [Float; 3])>,
    pub patterns: Vec<Pattern>,
    pub accents: Vec<(String, [Float; 3])>,
    pub background: [Float; 3],
    /// Views per product are drawn uniformly from this inclusive range.
    pub views: (usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
    Diamond,
}

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Diamond => "diamond",
        }
    }

    /// Distance-like depth inside the unit shape centred at the origin;
    /// negative outside.
    fn depth(self, u: Float, v: Float) -> Float {
        match self {
            ShapeKind::Square => 1.0 - u.abs().max(v.abs()),
            ShapeKind::Circle => 1.0 - (u * u + v * v).sqrt(),
            ShapeKind::Diamond => (1.0 - u.abs() - v.abs()) / std::f32::consts::SQRT_2 as Float,
            // Apex at the top, base at v = 1.
            ShapeKind::Triangle => (1.0 - v).min(((v + 1.0) * 0.5 - u.abs()) * 0.894),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Pattern {
    Plain,
    Striped,
    Dotted,
    Checked,
}

impl Pattern {
    pub fn name(self) -> &'static str {
        match self {
            Pattern::Plain => "plain",
            Pattern::Striped => "striped",
            Pattern::Dotted => "dotted",
            Pattern::Checked => "checked",
        }
    }
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        let named = |items: &[(&str, [Float; 3])]| items.iter().map(|(n, c)| (n.to_string(), *c)).collect();
        SyntheticSpec {
            shapes: vec![ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle, ShapeKind::Diamond],
            colors: named(&[
                ("red", [0.9, 0.1, 0.1]),
                ("green", [0.1, 0.7, 0.2]),
                ("blue", [0.1, 0.2, 0.9]),
                ("yellow", [0.95, 0.85, 0.1]),
                ("purple", [0.6, 0.2, 0.8]),
                ("orange", [1.0, 0.55, 0.0]),
            ]),
            patterns: vec![Pattern::Plain, Pattern::Striped, Pattern::Dotted, Pattern::Checked],
            accents: named(&[
                ("black", [0.05, 0.05, 0.05]),
                ("white", [1.0, 1.0, 1.0]),
                ("gray", [0.5, 0.5, 0.5]),
                ("brown", [0.45, 0.25, 0.1]),
            ]),
            background: [0.85, 0.85, 0.85],
            views: (1, 3),
        }
    }
}

impl SyntheticSpec {
    pub fn capacity(&self) -> usize {
        self.shapes.len() * self.colors.len() * self.patterns.len() * self.accents.len()
    }

    fn validate(&self) -> Result<()> {
        if self.capacity() == 0 {
            return Err(Error::invalid("every attribute axis needs at least one value"));
        }
        let (lo, hi) = self.views;
        if lo == 0 || lo > hi || hi > MAX_VIEWS {
            return Err(Error::invalid(format!("views per product must lie in 1..={MAX_VIEWS}, got {lo}..={hi}")));
        }
        Ok(())
    }
}

/// Attribute indices of one synthetic product.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Attributes {
    pub shape: usize,
    pub color: usize,
    pub pattern: usize,
    pub accent: usize,
}

impl Attributes {
    pub fn caption(&self, spec: &SyntheticSpec) -> String {
        format!(
            "{} {} {} with {} border",
            spec.patterns[self.pattern].name(),
            spec.colors[self.color].0,
            spec.shapes[self.shape].name(),
            spec.accents[self.accent].0
        )
    }

    pub fn main_category(&self, spec: &SyntheticSpec) -> String {
        spec.shapes[self.shape].name().to_string()
    }

    pub fn sub_category(&self, spec: &SyntheticSpec) -> String {
        format!("{}-{}", spec.shapes[self.shape].name(), spec.patterns[self.pattern].name())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticProduct {
    pub record: ProductRecord,
    pub attributes: Attributes,
    pub images: Vec<Image>,
}

/// Renders one view. `scale` is the shape radius as a fraction of the
/// image side and `(dx, dy)` the centre offset in the same unit.
pub fn render(spec: &SyntheticSpec, a: &Attributes, size: usize, scale: Float, dx: Float, dy: Float) -> Image {
    let mut img = Image::filled(size, size, spec.background);
    let s = size as Float;
    let radius = scale * s;
    let (cx, cy) = (s * (0.5 + dx), s * (0.5 + dy));
    let border = (s / 16.0).max(1.0) / radius;
    let period = (size / 8).max(2);
    let fill = spec.colors[a.color].1;
    let accent = spec.accents[a.accent].1;
    let shape = spec.shapes[a.shape];
    let secondary = match spec.patterns[a.pattern] {
        Pattern::Checked => fill.map(|c| c * 0.45),
        _ => [1.0, 1.0, 1.0],
    };
    for y in 0..size {
        for x in 0..size {
            let u = (x as Float + 0.5 - cx) / radius;
            let v = (y as Float + 0.5 - cy) / radius;
            let d = shape.depth(u, v);
            if d < 0.0 {
                continue;
            }
            if d < border {
                img.set_pixel(y, x, accent);
                continue;
            }
            let (px, py) = (x % period, y % period);
            let alt = match spec.patterns[a.pattern] {
                Pattern::Plain => false,
                Pattern::Striped => (y / (period / 2).max(1)) % 2 == 1,
                Pattern::Dotted => {
                    let c = period as Float / 2.0;
                    let (ex, ey) = (px as Float + 0.5 - c, py as Float + 0.5 - c);
                    ex * ex + ey * ey <= (c * 0.5).powi(2).max(0.3)
                }
                Pattern::Checked => ((x / (period / 2).max(1)) + (y / (period / 2).max(1))) % 2 == 1,
            };
            img.set_pixel(y, x, if alt { secondary } else { fill });
        }
    }
    img
}

/// Generates `n` products with distinct attribute tuples. Images are
/// quantised to 8 bits so they equal what a PNG round trip returns.
pub fn synthesize(n: usize, size: usize, spec: &SyntheticSpec, seed: u64) -> Result<Vec<SyntheticProduct>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::invalid("at least one product is required"));
    }
    if n > spec.capacity() {
        return Err(Error::invalid(format!(
            "{n} products requested but only {} distinct attribute tuples exist",
            spec.capacity()
        )));
    }
    if size < 8 {
        return Err(Error::invalid(format!("image size {size} too small to render")));
    }
    let mut tuples = Vec::with_capacity(spec.capacity());
    for shape in 0..spec.shapes.len() {
        for color in 0..spec.colors.len() {
            for pattern in 0..spec.patterns.len() {
                for accent in 0..spec.accents.len() {
                    tuples.push(Attributes { shape, color, pattern, accent });
                }
            }
        }
    }
    tuples.shuffle(&mut rng_for(seed, "synth-tuples", 0));
    tuples.truncate(n);
    let products = tuples
        .into_par_iter()
        .enumerate()
        .map(|(i, attributes)| {
            let mut rng = rng_for(seed, "synth-product", i as u64);
            let id = format!("p{i:04}");
            let views = rng.gen_range(spec.views.0..=spec.views.1);
            let images: Vec<Image> = (0..views)
                .map(|_| {
                    let scale = rng.gen_range(0.28..0.40);
                    let dx = rng.gen_range(-0.08..0.08);
                    let dy = rng.gen_range(-0.08..0.08);
                    let img = render(spec, &attributes, size, scale, dx, dy);
                    normalize(&img.to_bytes(), size, size, 3).expect("rendered image is well-formed")
                })
                .collect();
            let record = ProductRecord {
                images: (0..views).map(|v| PathBuf::from(format!("images/{id}_{v}.png"))).collect(),
                id,
                caption: attributes.caption(spec),
                main_cat: attributes.main_category(spec),
                sub_cat: attributes.sub_category(spec),
            };
            SyntheticProduct {
                record,
                attributes,
                images,
            }
        })
        .collect();
    Ok(products)
}

/// Writes synthetic products as PNG files plus a manifest under `dir` and
/// returns the manifest path.
pub fn generate_synthetic(dir: &Path, n: usize, size: usize, spec: &SyntheticSpec, seed: u64) -> Result<PathBuf> {
    let products = synthesize(n, size, spec, seed)?;
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    products
        .par_iter()
        .try_for_each(|p| {
            p.images
                .iter()
                .zip(&p.record.images)
                .try_for_each(|(img, rel)| img.save_png(&dir.join(rel)))
        })?;
    let manifest = Manifest::from_records(products.into_iter().map(|p| p.record).collect())?;
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// In-memory dataset built directly from synthetic products.
pub fn synthetic_dataset(n: usize, size: usize, spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    let products = synthesize(n, size, spec, seed)?;
    let manifest = Manifest::from_records(products.iter().map(|p| p.record.clone()).collect())?;
    Ok(Dataset {
        products: products
            .into_iter()
            .map(|p| Product {
                main: manifest.main_id(&p.record.main_cat).expect("known category"),
                sub: manifest.sub_id(&p.record.sub_cat).expect("known category"),
                id: p.record.id,
                caption: p.record.caption,
                images: p.images,
            })
            .collect(),
        main_names: manifest.main_names,
        sub_names: manifest.sub_names,
    })
}
