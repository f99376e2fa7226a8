//! Class-map grids, marching-squares contours and a plain SVG writer for
//! 2-D decision boundaries.

use std::fmt::Write as _;

use crate::data::{Point, PointDataset};
use crate::error::{Error, Result};
use crate::nn::Mlp;

/// Smallest grid side accepted by [`Grid::evaluate`].
pub const MIN_RESOLUTION: usize = 16;

/// Axis-aligned box `[min, max]` in each coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub min: Point,
    pub max: Point,
}

impl BoundingBox {
    /// Tight box around `points`, grown by `pad` of its extent on each side.
    /// Degenerate extents are widened to 1.
    pub fn around(points: &[Point], pad: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("bounding box of an empty point set"));
        }
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for p in points {
            for d in 0..2 {
                min[d] = min[d].min(p[d]);
                max[d] = max[d].max(p[d]);
            }
        }
        for d in 0..2 {
            let extent = if max[d] > min[d] { max[d] - min[d] } else { 1.0 };
            min[d] -= pad * extent;
            max[d] += pad * extent;
            if max[d] == min[d] {
                min[d] -= 0.5;
                max[d] += 0.5;
            }
        }
        Ok(Self { min, max })
    }
}

/// Model probabilities on a `resolution × resolution` lattice of nodes,
/// row-major with `x1` as the slow axis.
#[derive(Debug, Clone)]
pub struct Grid {
    pub bbox: BoundingBox,
    pub resolution: usize,
    pub probs: Vec<Vec<f64>>,
}

impl Grid {
    pub fn evaluate(model: &Mlp, bbox: BoundingBox, resolution: usize) -> Result<Self> {
        if resolution < MIN_RESOLUTION {
            return Err(Error::invalid(format!(
                "grid resolution must be at least {MIN_RESOLUTION}, got {resolution}"
            )));
        }
        if model.input_dim() != 2 {
            return Err(Error::DimensionMismatch {
                expected: 2,
                actual: model.input_dim(),
            });
        }
        let mut grid = Self {
            bbox,
            resolution,
            probs: Vec::with_capacity(resolution * resolution),
        };
        for j in 0..resolution {
            for i in 0..resolution {
                let p = model.predict(&grid.node(i, j))?;
                grid.probs.push(p.into_inner());
            }
        }
        Ok(grid)
    }

    pub fn num_classes(&self) -> usize {
        self.probs.first().map_or(0, Vec::len)
    }

    /// Coordinates of node `(i, j)`.
    pub fn node(&self, i: usize, j: usize) -> Point {
        let step = |d: usize, k: usize| {
            self.bbox.min[d] + (self.bbox.max[d] - self.bbox.min[d]) * k as f64 / (self.resolution - 1) as f64
        };
        [step(0, i), step(1, j)]
    }

    fn at(&self, i: usize, j: usize) -> &[f64] {
        &self.probs[j * self.resolution + i]
    }

    /// Predicted class and confidence at a node. Ties go to the lower class.
    pub fn class_at(&self, i: usize, j: usize) -> (usize, f64) {
        let p = self.at(i, j);
        let mut best = 0;
        for (k, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = k;
            }
        }
        (best, p[best])
    }

    /// Nearest node to `x`, clamped to the grid.
    pub fn nearest(&self, x: Point) -> (usize, usize) {
        let idx = |d: usize| {
            let t = (x[d] - self.bbox.min[d]) / (self.bbox.max[d] - self.bbox.min[d]);
            ((t * (self.resolution - 1) as f64).round().max(0.0) as usize).min(self.resolution - 1)
        };
        (idx(0), idx(1))
    }

    /// `x0,x1,pred,confidence`, one row per node.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x0,x1,pred,confidence\n");
        for j in 0..self.resolution {
            for i in 0..self.resolution {
                let [x0, x1] = self.node(i, j);
                let (c, conf) = self.class_at(i, j);
                writeln!(s, "{x0},{x1},{c},{conf}").unwrap();
            }
        }
        s
    }

    /// Share of dataset points whose nearest node predicts their label.
    pub fn accuracy(&self, dataset: &PointDataset) -> f64 {
        if dataset.is_empty() {
            return 0.0;
        }
        let hits = dataset
            .points()
            .iter()
            .zip(dataset.oracle_labels())
            .filter(|(&p, &l)| {
                let (i, j) = self.nearest(p);
                self.class_at(i, j).0 == l
            })
            .count();
        hits as f64 / dataset.len() as f64
    }

    /// Margin `p_c − max_{k≠c} p_k` at every node.
    pub fn margin_field(&self, class: usize) -> Vec<f64> {
        self.probs
            .iter()
            .map(|p| {
                let other = p
                    .iter()
                    .enumerate()
                    .filter(|&(k, _)| k != class)
                    .map(|(_, &v)| v)
                    .fold(f64::NEG_INFINITY, f64::max);
                p[class] - other
            })
            .collect()
    }
}

/// A line segment in data coordinates.
pub type Segment = (Point, Point);

/// Zero-level contour of a node field laid out like [`Grid::probs`].
///
/// A node is inside when its value is strictly positive, so a field that is
/// identically zero has no contour. Saddle cells are resolved with the mean
/// of the four corners.
pub fn marching_squares(grid: &Grid, field: &[f64]) -> Vec<Segment> {
    let r = grid.resolution;
    let mut segments = Vec::new();
    let crossing = |a: (usize, usize), b: (usize, usize)| -> Point {
        let fa = field[a.1 * r + a.0];
        let fb = field[b.1 * r + b.0];
        let t = fa / (fa - fb);
        let pa = grid.node(a.0, a.1);
        let pb = grid.node(b.0, b.1);
        [pa[0] + t * (pb[0] - pa[0]), pa[1] + t * (pb[1] - pa[1])]
    };
    for j in 0..r - 1 {
        for i in 0..r - 1 {
            // bottom-left, bottom-right, top-right, top-left
            let corners = [(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)];
            let values: Vec<f64> = corners.iter().map(|&(x, y)| field[y * r + x]).collect();
            let inside: Vec<bool> = values.iter().map(|&v| v > 0.0).collect();
            // edge e joins corner e and corner e+1
            let edges: Vec<Option<Point>> = (0..4)
                .map(|e| {
                    let (a, b) = (e, (e + 1) % 4);
                    (inside[a] != inside[b]).then(|| crossing(corners[a], corners[b]))
                })
                .collect();
            let hits: Vec<Point> = edges.iter().flatten().copied().collect();
            match hits.len() {
                2 => segments.push((hits[0], hits[1])),
                4 => {
                    let centre = values.iter().sum::<f64>() / 4.0 > 0.0;
                    // cut off every corner that disagrees with the centre;
                    // corner k sits between edges k-1 and k
                    for k in 0..4 {
                        if inside[k] != centre {
                            let prev = edges[(k + 3) % 4].expect("saddle has four crossings");
                            let next = edges[k].expect("saddle has four crossings");
                            segments.push((prev, next));
                        }
                    }
                }
                _ => {}
            }
        }
    }
    segments
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

const CANVAS: f64 = 600.0;
const MARGIN: f64 = 20.0;

/// SVG with the decision contour, every point coloured by its hidden label,
/// and labeled points drawn as outlined squares.
pub fn boundary_svg(grid: &Grid, dataset: &PointDataset) -> String {
    let b = grid.bbox;
    let inner = CANVAS - 2.0 * MARGIN;
    let sx = |x: f64| MARGIN + (x - b.min[0]) / (b.max[0] - b.min[0]) * inner;
    let sy = |y: f64| CANVAS - MARGIN - (y - b.min[1]) / (b.max[1] - b.min[1]) * inner;

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{CANVAS}" height="{CANVAS}" viewBox="0 0 {CANVAS} {CANVAS}">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r##"<rect x="{MARGIN}" y="{MARGIN}" width="{inner}" height="{inner}" fill="none" stroke="#cccccc"/>"##
    )
    .unwrap();

    let c = grid.num_classes();
    let contour_classes = if c == 2 { 1 } else { c };
    let mut path = String::new();
    for class in 0..contour_classes {
        for (p, q) in marching_squares(grid, &grid.margin_field(class)) {
            write!(path, "M{:.2} {:.2}L{:.2} {:.2}", sx(p[0]), sy(p[1]), sx(q[0]), sy(q[1])).unwrap();
        }
    }
    if !path.is_empty() {
        writeln!(s, r#"<path d="{path}" fill="none" stroke="black" stroke-width="2"/>"#).unwrap();
    }

    writeln!(s, r#"<g fill-opacity="0.6">"#).unwrap();
    for ((p, &l), &m) in dataset.points().iter().zip(dataset.oracle_labels()).zip(dataset.labeled_mask()) {
        if !m {
            writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{}"/>"#,
                sx(p[0]),
                sy(p[1]),
                PALETTE[l % PALETTE.len()]
            )
            .unwrap();
        }
    }
    writeln!(s, "</g>").unwrap();
    for ((p, &l), &m) in dataset.points().iter().zip(dataset.oracle_labels()).zip(dataset.labeled_mask()) {
        if m {
            writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="10" height="10" fill="{}" stroke="black" stroke-width="1.5"/>"#,
                sx(p[0]) - 5.0,
                sy(p[1]) - 5.0,
                PALETTE[l % PALETTE.len()]
            )
            .unwrap();
        }
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> BoundingBox {
        BoundingBox {
            min: [0.0, 0.0],
            max: [1.0, 1.0],
        }
    }

    #[test]
    fn zero_model_has_no_contour() {
        let model = Mlp::zeros(&[2, 4, 2]).unwrap();
        let grid = Grid::evaluate(&model, square(), 16).unwrap();
        assert!(grid.probs.iter().all(|p| p == &[0.5, 0.5]));
        assert!(marching_squares(&grid, &grid.margin_field(0)).is_empty());
    }

    #[test]
    fn vertical_line_contour() {
        let model = Mlp::zeros(&[2, 2]).unwrap();
        let mut grid = Grid::evaluate(&model, square(), 16).unwrap();
        let r = grid.resolution;
        let field: Vec<f64> = (0..r * r).map(|k| grid.node(k % r, k / r)[0] - 0.5).collect();
        grid.probs = field.iter().map(|&f| vec![0.5 - f / 2.0, 0.5 + f / 2.0]).collect();
        let segs = marching_squares(&grid, &field);
        assert_eq!(segs.len(), r - 1);
        for (p, q) in segs {
            assert!((p[0] - 0.5).abs() < 1e-12 && (q[0] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn resolution_floor() {
        let model = Mlp::zeros(&[2, 2]).unwrap();
        assert!(Grid::evaluate(&model, square(), 15).is_err());
    }
}
