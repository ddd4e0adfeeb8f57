//! Boxes, grid tilings, positional encodings, relative geometry and the
//! region/grid alignment graph.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::numerics::{NumericsError, Tape, Tensor, Var};

/// Clamp applied to center offsets before taking their log.
pub const OFFSET_EPS: f64 = 1e-3;
/// Floor applied to the embedded geometry scalar so its log stays finite.
pub const OMEGA_FLOOR: f64 = 1e-6;
/// Width of the sinusoidal embedding of a raw 4-d geometry vector.
pub const GEOMETRY_EMBED_DIM: usize = 64;
const GEOMETRY_WAVELENGTH: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("invalid box {0:?}: need 0 <= min < max <= 1 on both axes")]
    InvalidBox([f64; 4]),
    #[error("d_model {0} must be a positive multiple of 4")]
    Indivisible(usize),
    #[error("non-finite relative geometry at pair ({0}, {1})")]
    NonFinite(usize, usize),
    #[error("invalid grid layout {0:?}")]
    Layout(String),
}

/// Axis-aligned box in normalized `[0, 1]` image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        let c = [x_min, y_min, x_max, y_max];
        let in_unit = c.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v));
        if !in_unit || x_min >= x_max || y_min >= y_max {
            return Err(GeometryError::InvalidBox(c));
        }
        Ok(Self { x_min, y_min, x_max, y_max })
    }

    pub fn from_array(c: [f64; 4]) -> Result<Self, GeometryError> {
        Self::new(c[0], c[1], c[2], c[3])
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    /// Center form `(x, y, w, h)`.
    pub fn center_form(&self) -> [f64; 4] {
        [
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
            self.x_max - self.x_min,
            self.y_max - self.y_min,
        ]
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    /// Overlap area; zero when the boxes only touch along an edge.
    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w > 0.0 && h > 0.0 {
            w * h
        } else {
            0.0
        }
    }
}

/// Uniform `rows × cols` tiling of the unit square.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridLayout {
    pub rows: usize,
    pub cols: usize,
}

impl Default for GridLayout {
    fn default() -> Self {
        Self { rows: 7, cols: 7 }
    }
}

impl GridLayout {
    pub fn new(rows: usize, cols: usize) -> Result<Self, GeometryError> {
        if rows == 0 || cols == 0 {
            return Err(GeometryError::Layout(format!("{rows}x{cols}")));
        }
        Ok(Self { rows, cols })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Box covered by cell `(row, col)`.
    pub fn cell_box(&self, row: usize, col: usize) -> BoundingBox {
        let (r, c) = (self.rows as f64, self.cols as f64);
        BoundingBox {
            x_min: col as f64 / c,
            y_min: row as f64 / r,
            x_max: (col + 1) as f64 / c,
            y_max: (row + 1) as f64 / r,
        }
    }

    /// Cell boxes in row-major order.
    pub fn cell_boxes(&self) -> Vec<BoundingBox> {
        (0..self.rows)
            .flat_map(|i| (0..self.cols).map(move |j| (i, j)))
            .map(|(i, j)| self.cell_box(i, j))
            .collect()
    }
}

impl fmt::Display for GridLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

impl FromStr for GridLayout {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (r, c) = s.split_once(['x', 'X']).ok_or_else(|| GeometryError::Layout(s.to_string()))?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| GeometryError::Layout(s.to_string()));
        Self::new(parse(r)?, parse(c)?)
    }
}

/// 1-d sinusoid table row: `sin(pos / 10000^(2k/dim))` at even slots, `cos` at odd.
pub fn sinusoid(pos: f64, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let k2 = (i - i % 2) as f64;
            let angle = pos / 10000f64.powf(k2 / dim as f64);
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Grid positional encoding: row sinusoid concatenated with column sinusoid,
/// each `d_model / 2` wide. Output `[rows * cols, d_model]`.
pub fn grid_positional_encoding(layout: GridLayout, d_model: usize) -> Result<Tensor, GeometryError> {
    if d_model == 0 || d_model % 4 != 0 {
        return Err(GeometryError::Indivisible(d_model));
    }
    let half = d_model / 2;
    let mut data = Vec::with_capacity(layout.len() * d_model);
    for i in 0..layout.rows {
        let row = sinusoid(i as f64, half);
        for j in 0..layout.cols {
            data.extend_from_slice(&row);
            data.extend(sinusoid(j as f64, half));
        }
    }
    Ok(Tensor::new(vec![layout.len(), d_model], data).expect("sized above"))
}

/// Corner coordinates as a `[n, 4]` tensor.
pub fn boxes_tensor(boxes: &[BoundingBox]) -> Option<Tensor> {
    if boxes.is_empty() {
        return None;
    }
    let data = boxes.iter().flat_map(|b| b.corners()).collect();
    Some(Tensor::new(vec![boxes.len(), 4], data).expect("sized"))
}

/// Region positional encoding: each box's corners mapped through the learned
/// `[d_model, 4]` matrix `w_emb`. Output `[n, d_model]`.
pub fn region_positional_encoding(tape: &mut Tape, boxes: &[BoundingBox], w_emb: Var) -> Result<Var, NumericsError> {
    let b = boxes_tensor(boxes).ok_or_else(|| NumericsError::Shape("no boxes".into()))?;
    let b = tape.constant(b);
    tape.matmul_t(b, w_emb)
}

/// Raw 4-d relation of box `i` to box `j`: log offsets scaled by `i`'s size
/// (offsets clamped at [`OFFSET_EPS`]) and log size ratios.
pub fn relative_geometry_raw(box_i: &BoundingBox, box_j: &BoundingBox) -> [f64; 4] {
    let [xi, yi, wi, hi] = box_i.center_form();
    let [xj, yj, wj, hj] = box_j.center_form();
    [
        ((xi - xj).abs().max(OFFSET_EPS) / wi).ln(),
        ((yi - yj).abs().max(OFFSET_EPS) / hi).ln(),
        (wi / wj).ln(),
        (hi / hj).ln(),
    ]
}

/// `[nq, nk, 4]` raw relations between every query box and key box.
pub fn relative_geometry_matrix(queries: &[BoundingBox], keys: &[BoundingBox]) -> Tensor {
    let mut data = Vec::with_capacity(queries.len() * keys.len() * 4);
    for q in queries {
        for k in keys {
            data.extend(relative_geometry_raw(q, k));
        }
    }
    Tensor::new(vec![queries.len(), keys.len(), 4], data).expect("non-empty box lists")
}

/// Sinusoidal embedding of each raw component into `GEOMETRY_EMBED_DIM / 4`
/// slots (sines then cosines), concatenated. `[nq, nk, 4]` → `[nq, nk, 64]`.
pub fn geometry_embedding(raw: &Tensor) -> Result<Tensor, GeometryError> {
    let shape = raw.shape();
    let (nq, nk) = (shape[0], shape[1]);
    let per = GEOMETRY_EMBED_DIM / 4;
    let freqs = per / 2;
    let inv: Vec<f64> = (0..freqs).map(|k| GEOMETRY_WAVELENGTH.powf(-(k as f64) / freqs as f64)).collect();
    let mut data = Vec::with_capacity(nq * nk * GEOMETRY_EMBED_DIM);
    for (p, comps) in raw.data().chunks(4).enumerate() {
        if comps.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite(p / nk, p % nk));
        }
        for &c in comps {
            data.extend(inv.iter().map(|f| (c * f).sin()));
            data.extend(inv.iter().map(|f| (c * f).cos()));
        }
    }
    Ok(Tensor::new(vec![nq, nk, GEOMETRY_EMBED_DIM], data).expect("sized"))
}

/// Strictly positive per-head geometry scalars `[heads, nq, nk]` on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GeometryBias {
    pub omega: Var,
}

/// Projects embedded relations through the learned `[heads, 64]` matrix
/// `w_g`, then ReLU and a floor at [`OMEGA_FLOOR`].
pub fn relative_geometry_embed(tape: &mut Tape, embedded: Var, w_g: Var) -> Result<GeometryBias, NumericsError> {
    let proj = tape.matmul_t(embedded, w_g)?;
    let act = tape.relu(proj)?;
    let floored = tape.clamp_min(act, OMEGA_FLOOR)?;
    let omega = tape.permute(floored, &[2, 0, 1])?;
    Ok(GeometryBias { omega })
}

/// Undirected graph over regions (first) and grid cells (after), connecting a
/// region and a cell iff their boxes overlap with positive area. Every node
/// carries a self-loop.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignmentGraph {
    n_regions: usize,
    n_grids: usize,
    adj: Vec<bool>,
}

impl AlignmentGraph {
    pub fn build(boxes: &[BoundingBox], layout: GridLayout) -> Self {
        let cells = layout.cell_boxes();
        let mut g = Self::empty(boxes.len(), cells.len());
        for (r, b) in boxes.iter().enumerate() {
            for (c, cell) in cells.iter().enumerate() {
                if b.intersection_area(cell) > 0.0 {
                    g.connect(r, boxes.len() + c);
                }
            }
        }
        g
    }

    /// Every region joined to every grid cell.
    pub fn complete_bipartite(n_regions: usize, n_grids: usize) -> Self {
        let mut g = Self::empty(n_regions, n_grids);
        for r in 0..n_regions {
            for c in 0..n_grids {
                g.connect(r, n_regions + c);
            }
        }
        g
    }

    fn empty(n_regions: usize, n_grids: usize) -> Self {
        let n = n_regions + n_grids;
        let mut adj = vec![false; n * n];
        for v in 0..n {
            adj[v * n + v] = true;
        }
        Self { n_regions, n_grids, adj }
    }

    fn connect(&mut self, a: usize, b: usize) {
        let n = self.len();
        self.adj[a * n + b] = true;
        self.adj[b * n + a] = true;
    }

    pub fn n_regions(&self) -> usize {
        self.n_regions
    }

    pub fn n_grids(&self) -> usize {
        self.n_grids
    }

    pub fn len(&self) -> usize {
        self.n_regions + self.n_grids
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adj[a * self.len() + b]
    }

    pub fn neighbors(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        let n = self.len();
        (0..n).filter(move |&u| self.adj[v * n + u])
    }

    /// Row-major `[n_regions, n_grids]` slice: region queries over grid keys.
    pub fn region_to_grid(&self) -> Vec<bool> {
        let mut m = Vec::with_capacity(self.n_regions * self.n_grids);
        for r in 0..self.n_regions {
            for c in 0..self.n_grids {
                m.push(self.has_edge(r, self.n_regions + c));
            }
        }
        m
    }

    /// Row-major `[n_grids, n_regions]` slice: grid queries over region keys.
    pub fn grid_to_region(&self) -> Vec<bool> {
        let mut m = Vec::with_capacity(self.n_regions * self.n_grids);
        for c in 0..self.n_grids {
            for r in 0..self.n_regions {
                m.push(self.has_edge(self.n_regions + c, r));
            }
        }
        m
    }
}
