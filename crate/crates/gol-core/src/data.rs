//! Data plumbing for long-tail experiments: annotation tables, class
//! frequency bookkeeping, spatial object-distribution grids, synthetic
//! long-tail datasets, and repeat-factor oversampling.
//!
//! Spatial grids live on normalized image coordinates: a center `(cx, cy)`
//! in an image of size `W x H` falls into column `floor(cx / W * grid_w)`
//! and row `floor(cy / H * grid_h)`, with coordinate 1.0 assigned to the
//! last cell. Grid cells are stored row-major.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Class frequency bookkeeping
// ---------------------------------------------------------------------------

/// LVIS-style frequency group of a class, assigned by image count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrequencyGroup {
    Rare,
    Common,
    Frequent,
}

/// Image-count boundaries separating the frequency groups. A class is rare
/// when its image count is at most `rare_max`, common when at most
/// `common_max`, frequent otherwise. Defaults follow the 1-10 / 11-100 /
/// >100 convention; scale them when datasets differ wildly in size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupThresholds {
    pub rare_max: usize,
    pub common_max: usize,
}

impl Default for GroupThresholds {
    fn default() -> Self {
        Self { rare_max: 10, common_max: 100 }
    }
}

impl GroupThresholds {
    pub fn group_of(&self, image_count: usize) -> FrequencyGroup {
        if image_count <= self.rare_max {
            FrequencyGroup::Rare
        } else if image_count <= self.common_max {
            FrequencyGroup::Common
        } else {
            FrequencyGroup::Frequent
        }
    }
}

/// One value per frequency group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PerGroup<T> {
    pub rare: T,
    pub common: T,
    pub frequent: T,
}

impl<T> PerGroup<T> {
    pub fn get(&self, group: FrequencyGroup) -> &T {
        match group {
            FrequencyGroup::Rare => &self.rare,
            FrequencyGroup::Common => &self.common,
            FrequencyGroup::Frequent => &self.frequent,
        }
    }

    pub fn get_mut(&mut self, group: FrequencyGroup) -> &mut T {
        match group {
            FrequencyGroup::Rare => &mut self.rare,
            FrequencyGroup::Common => &mut self.common,
            FrequencyGroup::Frequent => &mut self.frequent,
        }
    }
}

/// Per-class image count, instance count, and frequency group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassFrequencyEntry {
    pub image_count: usize,
    pub instance_count: usize,
    pub group: FrequencyGroup,
}

/// Class frequency statistics over a dataset. Classes are indexed densely
/// from 0; callers keep any mapping to external category ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassFrequencyTable {
    entries: Vec<ClassFrequencyEntry>,
    total_images: usize,
}

impl ClassFrequencyTable {
    /// Builds a table from per-class `(image_count, instance_count)` pairs.
    pub fn new(
        counts: &[(usize, usize)],
        total_images: usize,
        thresholds: GroupThresholds,
    ) -> Result<Self> {
        if total_images == 0 {
            return Err(Error::EmptyInput);
        }
        let entries = counts
            .iter()
            .map(|&(image_count, instance_count)| ClassFrequencyEntry {
                image_count,
                instance_count,
                group: thresholds.group_of(image_count),
            })
            .collect();
        Ok(Self { entries, total_images })
    }

    /// Builds a table from per-sample class labels, treating each sample as
    /// one image with one instance.
    pub fn from_labels(
        labels: &[usize],
        class_count: usize,
        thresholds: GroupThresholds,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut counts = vec![0usize; class_count];
        for (i, &label) in labels.iter().enumerate() {
            if label >= class_count {
                return Err(Error::InvalidConfig {
                    reason: format!("label {label} at index {i} exceeds class count {class_count}"),
                });
            }
            counts[label] += 1;
        }
        let pairs: Vec<(usize, usize)> = counts.iter().map(|&c| (c, c)).collect();
        Self::new(&pairs, labels.len(), thresholds)
    }

    /// Builds a table from an annotation table. Class index `i` corresponds
    /// to `table.categories[i]`.
    pub fn from_annotations(
        table: &AnnotationTable,
        thresholds: GroupThresholds,
    ) -> Result<Self> {
        if table.images.is_empty() {
            return Err(Error::EmptyInput);
        }
        let index_of: BTreeMap<u64, usize> = table
            .categories
            .iter()
            .enumerate()
            .map(|(i, c)| (c.id, i))
            .collect();
        let mut images_per_class: Vec<BTreeSet<u64>> =
            vec![BTreeSet::new(); table.categories.len()];
        let mut instances = vec![0usize; table.categories.len()];
        for obj in &table.objects {
            let class = index_of[&obj.category_id];
            images_per_class[class].insert(obj.image_id);
            instances[class] += 1;
        }
        let pairs: Vec<(usize, usize)> = images_per_class
            .iter()
            .zip(&instances)
            .map(|(imgs, &n)| (imgs.len(), n))
            .collect();
        Self::new(&pairs, table.images.len(), thresholds)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, class: usize) -> &ClassFrequencyEntry {
        &self.entries[class]
    }

    pub fn entries(&self) -> &[ClassFrequencyEntry] {
        &self.entries
    }

    pub fn group(&self, class: usize) -> FrequencyGroup {
        self.entries[class].group
    }

    pub fn total_images(&self) -> usize {
        self.total_images
    }

    /// Fraction of images containing the class, `image_count / total_images`.
    pub fn frequency_fraction(&self, class: usize) -> f64 {
        self.entries[class].image_count as f64 / self.total_images as f64
    }

    /// Rare-class indicator: true when the image frequency fraction lies
    /// strictly below `lambda`.
    pub fn below_threshold(&self, class: usize, lambda: f64) -> bool {
        self.frequency_fraction(class) < lambda
    }
}

// ---------------------------------------------------------------------------
// Annotation tables
// ---------------------------------------------------------------------------

/// One image with its pixel dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub width: f64,
    pub height: f64,
}

/// One annotated object, reduced to its center point. An optional feature
/// vector supports model-predicted distribution grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub image_id: u64,
    pub category_id: u64,
    pub center_x: f64,
    pub center_y: f64,
    pub features: Option<Vec<f64>>,
}

/// One category with its display name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryRecord {
    pub id: u64,
    pub name: String,
}

/// Validated annotation data: every object references an existing image and
/// category, and every center lies inside its image bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTable {
    pub images: Vec<ImageRecord>,
    pub objects: Vec<ObjectRecord>,
    pub categories: Vec<CategoryRecord>,
}

#[derive(Deserialize, Serialize)]
struct CocoRoot {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Deserialize, Serialize)]
struct CocoImage {
    id: u64,
    width: f64,
    height: f64,
}

#[derive(Deserialize, Serialize)]
struct CocoAnnotation {
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<Vec<f64>>,
}

#[derive(Deserialize, Serialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

/// Parses COCO-shaped annotation JSON into a validated table. Object centers
/// are derived from `bbox = [x, y, w, h]` as `(x + w/2, y + h/2)`.
pub fn parse_annotations(json: &str) -> Result<AnnotationTable> {
    let root: CocoRoot = serde_json::from_str(json)?;

    let mut image_dims: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
    for img in &root.images {
        if !(img.width > 0.0) || !(img.height > 0.0) {
            return Err(Error::BadImageDims {
                id: img.id,
                width: img.width,
                height: img.height,
            });
        }
        if image_dims.insert(img.id, (img.width, img.height)).is_some() {
            return Err(Error::DuplicateId { kind: "image", id: img.id });
        }
    }
    let mut category_ids: BTreeSet<u64> = BTreeSet::new();
    for cat in &root.categories {
        if !category_ids.insert(cat.id) {
            return Err(Error::DuplicateId { kind: "category", id: cat.id });
        }
    }

    let mut objects = Vec::with_capacity(root.annotations.len());
    for (index, ann) in root.annotations.iter().enumerate() {
        let (width, height) = *image_dims
            .get(&ann.image_id)
            .ok_or(Error::UnknownImageId { index, image_id: ann.image_id })?;
        if !category_ids.contains(&ann.category_id) {
            return Err(Error::UnknownCategoryId { index, category_id: ann.category_id });
        }
        let [x, y, w, h] = ann.bbox;
        let cx = x + w / 2.0;
        let cy = y + h / 2.0;
        let inside = cx >= 0.0 && cx <= width && cy >= 0.0 && cy <= height;
        if !inside {
            return Err(Error::CenterOutOfBounds { index, x: cx, y: cy, width, height });
        }
        objects.push(ObjectRecord {
            image_id: ann.image_id,
            category_id: ann.category_id,
            center_x: cx,
            center_y: cy,
            features: ann.features.clone(),
        });
    }

    Ok(AnnotationTable {
        images: root
            .images
            .into_iter()
            .map(|i| ImageRecord { id: i.id, width: i.width, height: i.height })
            .collect(),
        objects,
        categories: root
            .categories
            .into_iter()
            .map(|c| CategoryRecord { id: c.id, name: c.name })
            .collect(),
    })
}

/// Serializes a table back to COCO-shaped JSON. Centers are emitted as
/// degenerate boxes `[cx, cy, 0, 0]`, so `parse_annotations` round-trips the
/// table exactly.
pub fn serialize_annotations(table: &AnnotationTable) -> Result<String> {
    let root = CocoRoot {
        images: table
            .images
            .iter()
            .map(|i| CocoImage { id: i.id, width: i.width, height: i.height })
            .collect(),
        annotations: table
            .objects
            .iter()
            .map(|o| CocoAnnotation {
                image_id: o.image_id,
                category_id: o.category_id,
                bbox: [o.center_x, o.center_y, 0.0, 0.0],
                features: o.features.clone(),
            })
            .collect(),
        categories: table
            .categories
            .iter()
            .map(|c| CocoCategory { id: c.id, name: c.name.clone() })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&root)?)
}

// ---------------------------------------------------------------------------
// Spatial grids
// ---------------------------------------------------------------------------

/// What a grid's cells measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    /// P(obj, u): fraction of all object centers per cell.
    Occurrence,
    /// P(y | obj, u): per-cell fraction of centers belonging to one class.
    Membership,
    /// P(y, u): fraction of all centers that are class y, per cell.
    Joint,
}

impl GridKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GridKind::Occurrence => "occurrence",
            GridKind::Membership => "membership",
            GridKind::Joint => "joint",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "occurrence" => Ok(GridKind::Occurrence),
            "membership" => Ok(GridKind::Membership),
            "joint" => Ok(GridKind::Joint),
            other => Err(Error::MalformedGrid { reason: format!("unknown grid kind `{other}`") }),
        }
    }
}

/// A row-major grid over normalized image coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialGrid {
    pub grid_h: usize,
    pub grid_w: usize,
    pub kind: GridKind,
    pub cells: Vec<f64>,
    /// For membership grids: true where the cell contains at least one
    /// object, distinguishing genuine zeros from undefined conditionals.
    pub occupied: Option<Vec<bool>>,
}

impl SpatialGrid {
    pub fn cell(&self, row: usize, col: usize) -> f64 {
        self.cells[row * self.grid_w + col]
    }

    pub fn total_mass(&self) -> f64 {
        self.cells.iter().sum()
    }

    pub fn same_shape(&self, other: &SpatialGrid) -> bool {
        self.grid_h == other.grid_h && self.grid_w == other.grid_w
    }

    /// Writes the grid as CSV: a `grid_h,grid_w,kind` header line, one line
    /// of values for it, then `grid_h` lines of `grid_w` cells each.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("grid_h,grid_w,kind\n");
        out.push_str(&format!("{},{},{}\n", self.grid_h, self.grid_w, self.kind.as_str()));
        for row in 0..self.grid_h {
            let line: Vec<String> = (0..self.grid_w)
                .map(|col| format!("{}", self.cell(row, col)))
                .collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    /// Parses the CSV format written by [`Self::to_csv_string`]. Occupancy
    /// masks are not part of the format, so `occupied` comes back as `None`.
    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::MalformedGrid { reason: "empty file".into() })?;
        if header.trim() != "grid_h,grid_w,kind" {
            return Err(Error::MalformedGrid {
                reason: format!("bad header `{header}`, expected `grid_h,grid_w,kind`"),
            });
        }
        let meta = lines
            .next()
            .ok_or_else(|| Error::MalformedGrid { reason: "missing dimensions line".into() })?;
        let parts: Vec<&str> = meta.trim().split(',').collect();
        if parts.len() != 3 {
            return Err(Error::MalformedGrid {
                reason: format!("dimensions line `{meta}` must have 3 fields"),
            });
        }
        let grid_h: usize = parts[0]
            .parse()
            .map_err(|_| Error::MalformedGrid { reason: format!("bad grid_h `{}`", parts[0]) })?;
        let grid_w: usize = parts[1]
            .parse()
            .map_err(|_| Error::MalformedGrid { reason: format!("bad grid_w `{}`", parts[1]) })?;
        let kind = GridKind::parse(parts[2])?;
        if grid_h == 0 || grid_w == 0 {
            return Err(Error::BadGridDims { grid_h, grid_w });
        }
        let mut cells = Vec::with_capacity(grid_h * grid_w);
        for (row, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let values: Vec<&str> = line.trim().split(',').collect();
            if values.len() != grid_w {
                return Err(Error::MalformedGrid {
                    reason: format!("row {row} has {} cells, expected {grid_w}", values.len()),
                });
            }
            for v in values {
                let parsed: f64 = v.parse().map_err(|_| Error::MalformedGrid {
                    reason: format!("bad cell value `{v}` in row {row}"),
                })?;
                cells.push(parsed);
            }
        }
        if cells.len() != grid_h * grid_w {
            return Err(Error::MalformedGrid {
                reason: format!("expected {} cells, found {}", grid_h * grid_w, cells.len()),
            });
        }
        Ok(SpatialGrid { grid_h, grid_w, kind, cells, occupied: None })
    }
}

/// Maps a normalized coordinate to a cell index; 1.0 lands in the last cell.
fn cell_coord(center: f64, extent: f64, n: usize) -> usize {
    let u = center / extent;
    ((u * n as f64) as usize).min(n - 1)
}

fn check_grid_dims(grid_h: usize, grid_w: usize) -> Result<()> {
    if grid_h == 0 || grid_w == 0 {
        return Err(Error::BadGridDims { grid_h, grid_w });
    }
    Ok(())
}

fn image_dims(table: &AnnotationTable) -> BTreeMap<u64, (f64, f64)> {
    table.images.iter().map(|i| (i.id, (i.width, i.height))).collect()
}

/// Per-object cell indices, shared by every grid builder so all grids agree
/// on binning.
fn object_cells(table: &AnnotationTable, grid_h: usize, grid_w: usize) -> Vec<usize> {
    let dims = image_dims(table);
    table
        .objects
        .iter()
        .map(|o| {
            let (w, h) = dims[&o.image_id];
            let row = cell_coord(o.center_y, h, grid_h);
            let col = cell_coord(o.center_x, w, grid_w);
            row * grid_w + col
        })
        .collect()
}

fn ensure_category(table: &AnnotationTable, category_id: u64) -> Result<()> {
    if table.categories.iter().any(|c| c.id == category_id) {
        Ok(())
    } else {
        Err(Error::UnknownCategory { category_id })
    }
}

/// Occurrence grid P(obj, u): object centers per cell divided by the total
/// object count.
pub fn occurrence_grid(table: &AnnotationTable, grid_h: usize, grid_w: usize) -> Result<SpatialGrid> {
    check_grid_dims(grid_h, grid_w)?;
    let m = table.objects.len();
    if m == 0 {
        return Err(Error::NoObjects);
    }
    let mut counts = vec![0usize; grid_h * grid_w];
    for cell in object_cells(table, grid_h, grid_w) {
        counts[cell] += 1;
    }
    let cells = counts.iter().map(|&c| c as f64 / m as f64).collect();
    Ok(SpatialGrid { grid_h, grid_w, kind: GridKind::Occurrence, cells, occupied: None })
}

/// Membership grid P(y | obj, u): per cell, the fraction of centers that
/// belong to `category_id`. Cells without objects report 0 and are marked
/// unoccupied.
pub fn membership_grid(
    table: &AnnotationTable,
    category_id: u64,
    grid_h: usize,
    grid_w: usize,
) -> Result<SpatialGrid> {
    check_grid_dims(grid_h, grid_w)?;
    ensure_category(table, category_id)?;
    if table.objects.is_empty() {
        return Err(Error::NoObjects);
    }
    let mut total = vec![0usize; grid_h * grid_w];
    let mut matching = vec![0usize; grid_h * grid_w];
    for (obj, cell) in table.objects.iter().zip(object_cells(table, grid_h, grid_w)) {
        total[cell] += 1;
        if obj.category_id == category_id {
            matching[cell] += 1;
        }
    }
    let cells = matching
        .iter()
        .zip(&total)
        .map(|(&y, &t)| if t == 0 { 0.0 } else { y as f64 / t as f64 })
        .collect();
    let occupied = total.iter().map(|&t| t > 0).collect();
    Ok(SpatialGrid {
        grid_h,
        grid_w,
        kind: GridKind::Membership,
        cells,
        occupied: Some(occupied),
    })
}

/// Joint grid P(y, u) = P(y | obj, u) * P(obj, u), computed directly as
/// class-y centers per cell over the total object count so that it matches
/// plain enumeration bit for bit.
pub fn joint_grid(
    table: &AnnotationTable,
    category_id: u64,
    grid_h: usize,
    grid_w: usize,
) -> Result<SpatialGrid> {
    check_grid_dims(grid_h, grid_w)?;
    ensure_category(table, category_id)?;
    let m = table.objects.len();
    if m == 0 {
        return Err(Error::NoObjects);
    }
    let mut matching = vec![0usize; grid_h * grid_w];
    for (obj, cell) in table.objects.iter().zip(object_cells(table, grid_h, grid_w)) {
        if obj.category_id == category_id {
            matching[cell] += 1;
        }
    }
    let cells = matching.iter().map(|&c| c as f64 / m as f64).collect();
    Ok(SpatialGrid { grid_h, grid_w, kind: GridKind::Joint, cells, occupied: None })
}

// ---------------------------------------------------------------------------
// Synthetic long-tail data
// ---------------------------------------------------------------------------

/// Recipe for a synthetic long-tail classification dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub class_count: usize,
    /// Ratio of the largest to the smallest class size; must be >= 1.
    pub imbalance_factor: f64,
    /// Size of the largest class.
    pub head_size: usize,
    pub feature_dim: usize,
    pub seed: u64,
}

/// Synthetic classification data: one isotropic unit-variance Gaussian
/// cluster per class, class sizes decaying geometrically from `head_size`
/// down to `head_size / imbalance_factor`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub feature_dim: usize,
    pub class_count: usize,
    /// Flattened sample features, `len = labels.len() * feature_dim`.
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub class_sizes: Vec<usize>,
    /// Cluster centers, `len = class_count * feature_dim`. The constellation
    /// is scaled so the closest pair of centers sits at distance 1.
    pub means: Vec<f64>,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, index: usize) -> &[f64] {
        &self.features[index * self.feature_dim..(index + 1) * self.feature_dim]
    }

    pub fn class_mean(&self, class: usize) -> &[f64] {
        &self.means[class * self.feature_dim..(class + 1) * self.feature_dim]
    }
}

/// Class sizes `round(head_size * IF^(-k / (C-1)))`, floored at 1 so every
/// class exists.
pub fn longtail_sizes(class_count: usize, imbalance_factor: f64, head_size: usize) -> Vec<usize> {
    if class_count == 1 {
        return vec![head_size];
    }
    let c = class_count as f64;
    (0..class_count)
        .map(|k| {
            let exponent = -(k as f64) / (c - 1.0);
            let size = (head_size as f64) * imbalance_factor.powf(exponent);
            (size.round() as usize).max(1)
        })
        .collect()
}

/// Generates a synthetic long-tail dataset, deterministic in `cfg.seed`.
pub fn make_longtail(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    if cfg.class_count < 2 {
        return Err(Error::DegenerateClassCount { count: cfg.class_count });
    }
    if !cfg.imbalance_factor.is_finite() || cfg.imbalance_factor < 1.0 {
        return Err(Error::InvalidConfig {
            reason: format!("imbalance factor must be >= 1, got {}", cfg.imbalance_factor),
        });
    }
    if cfg.head_size == 0 || cfg.feature_dim == 0 {
        return Err(Error::InvalidConfig {
            reason: "head size and feature dim must be positive".into(),
        });
    }

    let c = cfg.class_count;
    let d = cfg.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut means: Vec<f64> = (0..c * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mut min_dist_sq = f64::INFINITY;
    for i in 0..c {
        for j in (i + 1)..c {
            let dist_sq: f64 = (0..d)
                .map(|k| {
                    let delta = means[i * d + k] - means[j * d + k];
                    delta * delta
                })
                .sum();
            min_dist_sq = min_dist_sq.min(dist_sq);
        }
    }
    if min_dist_sq < 1e-24 {
        return Err(Error::InvalidConfig { reason: "degenerate coincident class means".into() });
    }
    // Scale so the closest pair of class means sits at unit distance.
    let scale = 1.0 / min_dist_sq.sqrt();
    for m in &mut means {
        *m *= scale;
    }

    let class_sizes = longtail_sizes(c, cfg.imbalance_factor, cfg.head_size);
    let total: usize = class_sizes.iter().sum();
    let mut features = Vec::with_capacity(total * d);
    let mut labels = Vec::with_capacity(total);
    for (class, &size) in class_sizes.iter().enumerate() {
        for _ in 0..size {
            for k in 0..d {
                let noise: f64 = rng.sample(StandardNormal);
                features.push(means[class * d + k] + noise);
            }
            labels.push(class);
        }
    }

    Ok(SyntheticDataset {
        feature_dim: d,
        class_count: c,
        features,
        labels,
        class_sizes,
        means,
    })
}

// ---------------------------------------------------------------------------
// Splits and samplers
// ---------------------------------------------------------------------------

/// Disjoint train/test index sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Fixed stratified 80/20 split. Per class, the last ~20% of its samples
/// (at least one) become test data; the rest train. Classes with a single
/// sample contribute that sample to test only.
pub fn stratified_split(labels: &[usize], class_count: usize) -> Result<SplitIndices> {
    if labels.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); class_count];
    for (i, &label) in labels.iter().enumerate() {
        if label >= class_count {
            return Err(Error::InvalidConfig {
                reason: format!("label {label} at index {i} exceeds class count {class_count}"),
            });
        }
        per_class[label].push(i);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for indices in &per_class {
        if indices.is_empty() {
            continue;
        }
        let n = indices.len();
        let n_test = ((0.2 * n as f64).round() as usize).clamp(1, n);
        let n_train = n - n_test;
        train.extend_from_slice(&indices[..n_train]);
        test.extend_from_slice(&indices[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitIndices { train, test })
}

/// Per-class repeat factors `max(1, sqrt(t / f_c))` with `f_c` the image
/// frequency fraction. `t` is the oversampling threshold in `(0, 1]`.
pub fn repeat_factors(freq: &ClassFrequencyTable, t: f64) -> Result<Vec<f64>> {
    if !t.is_finite() || t <= 0.0 || t > 1.0 {
        return Err(Error::InvalidRepeatThreshold { value: t });
    }
    (0..freq.len())
        .map(|class| {
            if freq.entry(class).image_count == 0 {
                return Err(Error::ZeroFrequency { class });
            }
            let f = freq.frequency_fraction(class);
            Ok((t / f).sqrt().max(1.0))
        })
        .collect()
}

/// Per-image repeat factors: the max factor over the categories present in
/// each image, 1.0 for images without objects. `freq` rows must align with
/// `table.categories`.
pub fn image_repeat_factors(
    table: &AnnotationTable,
    freq: &ClassFrequencyTable,
    t: f64,
) -> Result<Vec<f64>> {
    if freq.len() != table.categories.len() {
        return Err(Error::LengthMismatch { left: freq.len(), right: table.categories.len() });
    }
    let per_class = repeat_factors(freq, t)?;
    let index_of: BTreeMap<u64, usize> = table
        .categories
        .iter()
        .enumerate()
        .map(|(i, c)| (c.id, i))
        .collect();
    let mut per_image: BTreeMap<u64, f64> = table.images.iter().map(|i| (i.id, 1.0)).collect();
    for obj in &table.objects {
        let factor = per_class[index_of[&obj.category_id]];
        let slot = per_image.get_mut(&obj.image_id).expect("validated image id");
        *slot = slot.max(factor);
    }
    Ok(table.images.iter().map(|i| per_image[&i.id]).collect())
}

/// Expands items by their repeat factors: item `i` appears `floor(r_i)`
/// times plus one more with probability `frac(r_i)`. Exactly one uniform
/// draw is consumed per item, so output depends only on `factors` and the
/// RNG stream.
pub fn expand_indices_with_rng<R: RngCore>(factors: &[f64], rng: &mut R) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(factors.len());
    for (i, &r) in factors.iter().enumerate() {
        if !r.is_finite() || r < 0.0 {
            return Err(Error::InvalidConfig {
                reason: format!("repeat factor {r} at index {i} must be finite and non-negative"),
            });
        }
        let whole = r.floor() as usize;
        let frac = r - r.floor();
        out.extend(std::iter::repeat(i).take(whole));
        let draw: f64 = rng.random();
        if draw < frac {
            out.push(i);
        }
    }
    Ok(out)
}

/// Seeded wrapper around [`expand_indices_with_rng`].
pub fn expand_indices(factors: &[f64], seed: u64) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    expand_indices_with_rng(factors, &mut rng)
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    /// Brute-force per-cell counting: for each cell, scan all objects and
    /// test membership against the cell's coordinate interval.
    fn brute_force_counts(
        table: &AnnotationTable,
        grid_h: usize,
        grid_w: usize,
        category: Option<u64>,
    ) -> Vec<usize> {
        let dims = image_dims(table);
        let mut counts = vec![0usize; grid_h * grid_w];
        for (idx, slot) in counts.iter_mut().enumerate() {
            let row = idx / grid_w;
            let col = idx % grid_w;
            for obj in &table.objects {
                if let Some(cid) = category {
                    if obj.category_id != cid {
                        continue;
                    }
                }
                let (w, h) = dims[&obj.image_id];
                let u = obj.center_x / w * grid_w as f64;
                let v = obj.center_y / h * grid_h as f64;
                let col_hit = (u >= col as f64 && u < (col + 1) as f64)
                    || (col == grid_w - 1 && u >= grid_w as f64);
                let row_hit = (v >= row as f64 && v < (row + 1) as f64)
                    || (row == grid_h - 1 && v >= grid_h as f64);
                if col_hit && row_hit {
                    *slot += 1;
                }
            }
        }
        counts
    }

    prop_compose! {
        fn arbitrary_table()(
            n_objects in 1usize..200,
            grid_seed in any::<u64>(),
        ) -> (AnnotationTable, u64) {
            // Deterministic table construction from a seed keeps shrinking sane.
            let mut rng = ChaCha8Rng::seed_from_u64(grid_seed);
            let images = vec![
                ImageRecord { id: 1, width: 640.0, height: 480.0 },
                ImageRecord { id: 2, width: 100.0, height: 100.0 },
            ];
            let categories = vec![
                CategoryRecord { id: 11, name: "a".into() },
                CategoryRecord { id: 22, name: "b".into() },
                CategoryRecord { id: 33, name: "c".into() },
            ];
            let objects = (0..n_objects)
                .map(|_| {
                    let img = &images[rng.random_range(0..2usize)];
                    ObjectRecord {
                        image_id: img.id,
                        category_id: categories[rng.random_range(0..3usize)].id,
                        center_x: rng.random_range(0.0..=img.width),
                        center_y: rng.random_range(0.0..=img.height),
                        features: None,
                    }
                })
                .collect();
            (AnnotationTable { images, objects, categories }, grid_seed)
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn grids_match_brute_force(
            (table, seed) in arbitrary_table(),
            grid_h in 1usize..9,
            grid_w in 1usize..9,
        ) {
            let _ = seed;
            let m = table.objects.len();
            let occurrence = occurrence_grid(&table, grid_h, grid_w).unwrap();
            let total = brute_force_counts(&table, grid_h, grid_w, None);
            for (cell, &count) in total.iter().enumerate() {
                prop_assert_eq!(occurrence.cells[cell], count as f64 / m as f64);
            }
            for &cid in &[11u64, 22, 33] {
                let class_counts = brute_force_counts(&table, grid_h, grid_w, Some(cid));
                let joint = joint_grid(&table, cid, grid_h, grid_w).unwrap();
                let membership = membership_grid(&table, cid, grid_h, grid_w).unwrap();
                for cell in 0..grid_h * grid_w {
                    prop_assert_eq!(joint.cells[cell], class_counts[cell] as f64 / m as f64);
                    let expected = if total[cell] == 0 {
                        0.0
                    } else {
                        class_counts[cell] as f64 / total[cell] as f64
                    };
                    prop_assert_eq!(membership.cells[cell], expected);
                }
            }
        }

        #[test]
        fn occurrence_mass_is_one((table, _) in arbitrary_table(), gh in 1usize..9, gw in 1usize..9) {
            let g = occurrence_grid(&table, gh, gw).unwrap();
            prop_assert!((g.total_mass() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn split_sizes_are_stable(sizes in proptest::collection::vec(1usize..60, 2..12)) {
            let labels: Vec<usize> = sizes
                .iter()
                .enumerate()
                .flat_map(|(k, &n)| std::iter::repeat(k).take(n))
                .collect();
            let split = stratified_split(&labels, sizes.len()).unwrap();
            prop_assert_eq!(split.train.len() + split.test.len(), labels.len());
            for (class, &n) in sizes.iter().enumerate() {
                let n_test = split.test.iter().filter(|&&i| labels[i] == class).count();
                let expected = ((0.2 * n as f64).round() as usize).clamp(1, n);
                prop_assert_eq!(n_test, expected);
            }
        }

        #[test]
        fn repeat_factors_are_at_least_one(
            counts in proptest::collection::vec(1usize..500, 1..20),
            t in 0.001f64..1.0,
        ) {
            let total: usize = counts.iter().sum();
            let pairs: Vec<(usize, usize)> = counts.iter().map(|&c| (c, c)).collect();
            let freq = ClassFrequencyTable::new(&pairs, total, GroupThresholds::default()).unwrap();
            let r = repeat_factors(&freq, t).unwrap();
            prop_assert!(r.iter().all(|&x| x >= 1.0));
        }
    }
}
