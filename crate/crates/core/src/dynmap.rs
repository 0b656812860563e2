//! Dynamic maps: nested three-level grids that spend cells on regions of
//! interest and keep the rest of the extent coarse.
//!
//! Cell order is raster order (rows bottom to top, columns left to right)
//! over the coarse tiles. A refined tile is replaced in place by its
//! children, themselves in raster order, and a refined mid cell likewise
//! expands into its four fine children. Matrix indices follow this order.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum number of cells a map may have (the model input is 64×64).
pub const MAX_CELLS: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MapError {
    #[error("invalid extent: {0}")]
    InvalidExtent(String),
    #[error("invalid grid levels: {0}")]
    InvalidLevels(String),
    #[error("refinement yields {count} cells, more than {MAX_CELLS}")]
    CellBudgetExceeded { count: usize },
    #[error("{field} does not snap to the {grid} m grid")]
    MisalignedRectangle { field: String, grid: i64 },
    #[error("{field} lies outside the extent")]
    RectangleOutOfExtent { field: String },
    #[error("{field} is not covered by the mid-resolution rectangles")]
    FineNotNested { field: String },
    #[error("point ({x}, {y}) is outside the extent")]
    NotInExtent { x: f64, y: f64 },
    #[error("cells do not tile the extent: {0}")]
    TilingViolation(String),
    #[error("{field}: {detail}")]
    InvalidCell { field: String, detail: String },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
}

/// Axis-aligned rectangle in integer meters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rect {
    pub min_x: i64,
    pub min_y: i64,
    pub width: i64,
    pub height: i64,
}

impl Rect {
    pub const fn new(min_x: i64, min_y: i64, width: i64, height: i64) -> Self {
        Rect {
            min_x,
            min_y,
            width,
            height,
        }
    }

    pub fn max_x(&self) -> i64 {
        self.min_x + self.width
    }

    pub fn max_y(&self) -> i64 {
        self.min_y + self.height
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        other.min_x >= self.min_x
            && other.min_y >= self.min_y
            && other.max_x() <= self.max_x()
            && other.max_y() <= self.max_y()
    }

    /// True when the interiors intersect.
    pub fn overlaps(&self, other: &Rect) -> bool {
        self.min_x < other.max_x()
            && other.min_x < self.max_x()
            && self.min_y < other.max_y()
            && other.min_y < self.max_y()
    }

    pub fn area(&self) -> i128 {
        self.width as i128 * self.height as i128
    }
}

/// Planar extent covered by a map; sides are multiples of the coarse cell.
pub type Extent = Rect;

/// Side lengths of the three nesting levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridLevels {
    pub coarse: i64,
    pub mid: i64,
    pub fine: i64,
}

impl Default for GridLevels {
    fn default() -> Self {
        GridLevels {
            coarse: 12_000,
            mid: 3_000,
            fine: 1_500,
        }
    }
}

impl GridLevels {
    pub fn validate(&self) -> Result<(), MapError> {
        let ok = self.fine > 0
            && self.mid > self.fine
            && self.coarse > self.mid
            && self.mid % self.fine == 0
            && self.coarse % self.mid == 0;
        if ok {
            Ok(())
        } else {
            Err(MapError::InvalidLevels(format!("{self:?}")))
        }
    }

    pub fn contains_side(&self, side: i64) -> bool {
        side == self.coarse || side == self.mid || side == self.fine
    }
}

/// Regions to refine, plus the label used as the model condition.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinementSpec {
    pub name: String,
    #[serde(default)]
    pub mid_rects: Vec<Rect>,
    #[serde(default)]
    pub fine_rects: Vec<Rect>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub index: usize,
    pub min_x: i64,
    pub min_y: i64,
    pub side: i64,
}

impl Cell {
    pub fn rect(&self) -> Rect {
        Rect::new(self.min_x, self.min_y, self.side, self.side)
    }

    pub fn centroid(&self) -> (f64, f64) {
        let half = self.side as f64 / 2.0;
        (self.min_x as f64 + half, self.min_y as f64 + half)
    }
}

/// An immutable multi-resolution tiling of an extent.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicMap {
    name: String,
    extent: Extent,
    levels: GridLevels,
    cells: Vec<Cell>,
    // Cell index for every fine-grid square, row-major from the bottom-left.
    lookup: Vec<u8>,
    lookup_cols: usize,
}

impl DynamicMap {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn extent(&self) -> Extent {
        self.extent
    }

    pub fn levels(&self) -> GridLevels {
        self.levels
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Euclidean distance between cell centroids, in meters.
    pub fn centroid_distance(&self, i: usize, j: usize) -> f64 {
        let (ax, ay) = self.cells[i].centroid();
        let (bx, by) = self.cells[j].centroid();
        (ax - bx).hypot(ay - by)
    }

    /// Index of the cell containing `(x, y)`.
    ///
    /// Cells are half-open `[min, min + side)`; the extent's top and right
    /// borders are closed and belong to the adjacent interior cell.
    pub fn locate(&self, x: f64, y: f64) -> Result<usize, MapError> {
        let e = self.extent;
        let inside = x >= e.min_x as f64
            && x <= e.max_x() as f64
            && y >= e.min_y as f64
            && y <= e.max_y() as f64;
        if !inside {
            return Err(MapError::NotInExtent { x, y });
        }
        let fine = self.levels.fine as f64;
        let rows = self.lookup.len() / self.lookup_cols;
        let col = (((x - e.min_x as f64) / fine).floor() as usize).min(self.lookup_cols - 1);
        let row = (((y - e.min_y as f64) / fine).floor() as usize).min(rows - 1);
        Ok(self.lookup[row * self.lookup_cols + col] as usize)
    }

    fn from_cells(
        name: String,
        extent: Extent,
        levels: GridLevels,
        cells: Vec<Cell>,
    ) -> Result<Self, MapError> {
        validate_extent(&extent, &levels)?;
        if cells.len() > MAX_CELLS {
            return Err(MapError::CellBudgetExceeded { count: cells.len() });
        }
        if cells.is_empty() {
            return Err(MapError::TilingViolation("map has no cells".into()));
        }
        for (i, c) in cells.iter().enumerate() {
            let field = format!("cells[{i}]");
            if c.index != i {
                return Err(MapError::InvalidCell {
                    field,
                    detail: format!("index {} does not match position", c.index),
                });
            }
            if !levels.contains_side(c.side) {
                return Err(MapError::InvalidCell {
                    field,
                    detail: format!("side {} is not a grid level", c.side),
                });
            }
            if (c.min_x - extent.min_x) % c.side != 0 || (c.min_y - extent.min_y) % c.side != 0 {
                return Err(MapError::MisalignedRectangle {
                    field,
                    grid: c.side,
                });
            }
            if !extent.contains_rect(&c.rect()) {
                return Err(MapError::RectangleOutOfExtent { field });
            }
        }
        for i in 0..cells.len() {
            for j in i + 1..cells.len() {
                if cells[i].rect().overlaps(&cells[j].rect()) {
                    return Err(MapError::TilingViolation(format!(
                        "cells[{i}] and cells[{j}] overlap"
                    )));
                }
            }
        }
        let covered: i128 = cells.iter().map(|c| c.rect().area()).sum();
        if covered != extent.area() {
            return Err(MapError::TilingViolation(format!(
                "cells cover {covered} m² of {} m²",
                extent.area()
            )));
        }

        let cols = (extent.width / levels.fine) as usize;
        let rows = (extent.height / levels.fine) as usize;
        let mut lookup = vec![0u8; cols * rows];
        for c in &cells {
            let c0 = ((c.min_x - extent.min_x) / levels.fine) as usize;
            let r0 = ((c.min_y - extent.min_y) / levels.fine) as usize;
            let span = (c.side / levels.fine) as usize;
            for r in r0..r0 + span {
                lookup[r * cols + c0..r * cols + c0 + span].fill(c.index as u8);
            }
        }
        Ok(DynamicMap {
            name,
            extent,
            levels,
            cells,
            lookup,
            lookup_cols: cols,
        })
    }
}

impl fmt::Display for DynamicMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({} cells)", self.name, self.cells.len())
    }
}

fn validate_extent(extent: &Extent, levels: &GridLevels) -> Result<(), MapError> {
    levels.validate()?;
    if extent.width <= 0 || extent.height <= 0 {
        return Err(MapError::InvalidExtent("width and height must be positive".into()));
    }
    if extent.width % levels.coarse != 0 || extent.height % levels.coarse != 0 {
        return Err(MapError::InvalidExtent(format!(
            "{}×{} is not a multiple of the {} m coarse cell",
            extent.width, extent.height, levels.coarse
        )));
    }
    Ok(())
}

fn check_rect(
    extent: &Extent,
    rect: &Rect,
    grid: i64,
    field: String,
) -> Result<(), MapError> {
    if rect.width <= 0 || rect.height <= 0 {
        return Err(MapError::InvalidCell {
            field,
            detail: "rectangle must have positive size".into(),
        });
    }
    if !extent.contains_rect(rect) {
        return Err(MapError::RectangleOutOfExtent { field });
    }
    let snapped = (rect.min_x - extent.min_x) % grid == 0
        && (rect.min_y - extent.min_y) % grid == 0
        && rect.width % grid == 0
        && rect.height % grid == 0;
    if !snapped {
        return Err(MapError::MisalignedRectangle { field, grid });
    }
    Ok(())
}

/// Raster-ordered square tiles of `side` covering `area`.
fn raster(area: Rect, side: i64) -> impl Iterator<Item = Rect> {
    let cols = area.width / side;
    let rows = area.height / side;
    (0..rows).flat_map(move |r| {
        (0..cols).map(move |c| Rect::new(area.min_x + c * side, area.min_y + r * side, side, side))
    })
}

/// Builds a map with the default 12 km / 3 km / 1.5 km levels.
pub fn build_map(extent: Extent, spec: &RefinementSpec) -> Result<DynamicMap, MapError> {
    build_map_with_levels(extent, GridLevels::default(), spec)
}

pub fn build_map_with_levels(
    extent: Extent,
    levels: GridLevels,
    spec: &RefinementSpec,
) -> Result<DynamicMap, MapError> {
    validate_extent(&extent, &levels)?;
    for (i, r) in spec.mid_rects.iter().enumerate() {
        check_rect(&extent, r, levels.coarse, format!("mid_rects[{i}]"))?;
    }
    for (i, r) in spec.fine_rects.iter().enumerate() {
        let field = format!("fine_rects[{i}]");
        check_rect(&extent, r, levels.mid, field.clone())?;
        let nested = raster(*r, levels.mid).all(|m| spec.mid_rects.iter().any(|mr| mr.contains_rect(&m)));
        if !nested {
            return Err(MapError::FineNotNested { field });
        }
    }

    let mut rects = Vec::new();
    for tile in raster(extent, levels.coarse) {
        if !spec.mid_rects.iter().any(|r| r.contains_rect(&tile)) {
            rects.push(tile);
            continue;
        }
        for mid in raster(tile, levels.mid) {
            if spec.fine_rects.iter().any(|r| r.contains_rect(&mid)) {
                rects.extend(raster(mid, levels.fine));
            } else {
                rects.push(mid);
            }
        }
    }
    if rects.len() > MAX_CELLS {
        return Err(MapError::CellBudgetExceeded { count: rects.len() });
    }
    let cells = rects
        .into_iter()
        .enumerate()
        .map(|(index, r)| Cell {
            index,
            min_x: r.min_x,
            min_y: r.min_y,
            side: r.width,
        })
        .collect();
    DynamicMap::from_cells(spec.name.clone(), extent, levels, cells)
}

/// Human-editable map specification: an extent plus refinement rectangles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapSpecDoc {
    pub name: String,
    pub extent: Extent,
    #[serde(default)]
    pub levels: Option<GridLevels>,
    #[serde(default)]
    pub mid_rects: Vec<Rect>,
    #[serde(default)]
    pub fine_rects: Vec<Rect>,
}

impl MapSpecDoc {
    pub fn refinement(&self) -> RefinementSpec {
        RefinementSpec {
            name: self.name.clone(),
            mid_rects: self.mid_rects.clone(),
            fine_rects: self.fine_rects.clone(),
        }
    }

    pub fn build(&self) -> Result<DynamicMap, MapError> {
        build_map_with_levels(self.extent, self.levels.unwrap_or_default(), &self.refinement())
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("map spec is always serializable")
    }
}

pub fn parse_map_spec(text: &str) -> Result<MapSpecDoc, MapError> {
    toml::from_str(text).map_err(|e| toml_error(text, e))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MapDoc {
    name: String,
    extent: Extent,
    levels: GridLevels,
    /// `[min_x, min_y, side]` per cell, in index order.
    cells: Vec<[i64; 3]>,
}

/// Serializes a built map (every cell listed explicitly).
pub fn serialize_map(map: &DynamicMap) -> String {
    let doc = MapDoc {
        name: map.name.clone(),
        extent: map.extent,
        levels: map.levels,
        cells: map.cells.iter().map(|c| [c.min_x, c.min_y, c.side]).collect(),
    };
    toml::to_string(&doc).expect("map is always serializable")
}

/// Parses a document written by [`serialize_map`], re-validating the tiling.
pub fn parse_map(text: &str) -> Result<DynamicMap, MapError> {
    let doc: MapDoc = toml::from_str(text).map_err(|e| toml_error(text, e))?;
    let cells = doc
        .cells
        .iter()
        .enumerate()
        .map(|(index, c)| Cell {
            index,
            min_x: c[0],
            min_y: c[1],
            side: c[2],
        })
        .collect();
    DynamicMap::from_cells(doc.name, doc.extent, doc.levels, cells)
}

fn toml_error(text: &str, e: toml::de::Error) -> MapError {
    let (line, column) = match e.span() {
        Some(span) => {
            let before = &text[..span.start.min(text.len())];
            let line = before.matches('\n').count() + 1;
            let column = before.len() - before.rfind('\n').map_or(0, |p| p + 1) + 1;
            (line, column)
        }
        None => (0, 0),
    };
    MapError::Parse {
        line,
        column,
        message: e.message().to_string(),
    }
}

/// Shared extent of the bundled demo maps: 48 km × 36 km.
pub const DEMO_EXTENT: Extent = Rect::new(0, 0, 48_000, 36_000);

/// Six demo map specifications, each focusing on a different part of the
/// demo extent. Names double as condition labels.
pub fn demo_map_specs() -> Vec<MapSpecDoc> {
    let km = 1_000;
    let doc = |name: &str, mids: Vec<Rect>, fines: Vec<Rect>| MapSpecDoc {
        name: name.to_string(),
        extent: DEMO_EXTENT,
        levels: None,
        mid_rects: mids,
        fine_rects: fines,
    };
    let tile = |c: i64, r: i64| Rect::new(c * 12 * km, r * 12 * km, 12 * km, 12 * km);
    vec![
        // West hub.
        doc("JE", vec![tile(0, 1)], vec![Rect::new(3 * km, 15 * km, 6 * km, 6 * km)]),
        // Central business district spanning two tiles.
        doc(
            "DT",
            vec![tile(2, 0), tile(2, 1)],
            vec![Rect::new(27 * km, 9 * km, 6 * km, 6 * km)],
        ),
        // North-east new town.
        doc("PG", vec![tile(2, 2)], vec![Rect::new(30 * km, 27 * km, 6 * km, 3 * km)]),
        // Three neighbouring focus areas in the same eastern tile.
        doc("TM0", vec![tile(3, 1)], vec![Rect::new(36 * km, 12 * km, 6 * km, 6 * km)]),
        doc("TM1", vec![tile(3, 1)], vec![Rect::new(42 * km, 12 * km, 6 * km, 6 * km)]),
        doc("TM2", vec![tile(3, 1)], vec![Rect::new(39 * km, 18 * km, 6 * km, 6 * km)]),
    ]
}
