//! Implicit description of the physical domain inside the embedding box and
//! the composed (quadtree + Gauss) quadrature used on cut cells.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Point,
    pub max: Point,
}

impl Aabb {
    pub const fn new(min: Point, max: Point) -> Self {
        Self { min, max }
    }

    pub fn from_coords(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self::new(Point::new(x0, y0), Point::new(x1, y1))
    }

    pub fn width(&self) -> f64 {
        self.max.x - self.min.x
    }

    pub fn height(&self) -> f64 {
        self.max.y - self.min.y
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> Point {
        Point::new(0.5 * (self.min.x + self.max.x), 0.5 * (self.min.y + self.max.y))
    }

    /// Closed containment test.
    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    pub fn quadrants(&self) -> [Aabb; 4] {
        let c = self.center();
        [
            Aabb::new(self.min, c),
            Aabb::from_coords(c.x, self.min.y, self.max.x, c.y),
            Aabb::from_coords(self.min.x, c.y, c.x, self.max.y),
            Aabb::new(c, self.max),
        ]
    }
}

/// Interpolating cubic spline with natural end conditions. Outside the
/// interpolation range it continues linearly.
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalCubicSpline {
    xs: Vec<f64>,
    ys: Vec<f64>,
    m: Vec<f64>,
}

impl NaturalCubicSpline {
    pub fn new(points: &[Point]) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::invalid("spline needs at least two points"));
        }
        if points.windows(2).any(|w| !(w[1].x > w[0].x)) {
            return Err(Error::invalid("spline abscissae must be strictly increasing"));
        }
        let n = points.len();
        let xs: Vec<f64> = points.iter().map(|p| p.x).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.y).collect();
        let mut m = vec![0.0; n];
        if n > 2 {
            // Thomas algorithm on the interior second derivatives
            let k = n - 2;
            let mut diag = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            let mut upper = vec![0.0; k];
            for i in 1..n - 1 {
                let h0 = xs[i] - xs[i - 1];
                let h1 = xs[i + 1] - xs[i];
                diag[i - 1] = 2.0 * (h0 + h1);
                upper[i - 1] = h1;
                rhs[i - 1] = 6.0 * ((ys[i + 1] - ys[i]) / h1 - (ys[i] - ys[i - 1]) / h0);
            }
            for i in 1..k {
                let lower = xs[i + 1] - xs[i];
                let w = lower / diag[i - 1];
                diag[i] -= w * upper[i - 1];
                rhs[i] -= w * rhs[i - 1];
            }
            m[k] = rhs[k - 1] / diag[k - 1];
            for i in (0..k - 1).rev() {
                m[i + 1] = (rhs[i] - upper[i] * m[i + 2]) / diag[i];
            }
        }
        Ok(Self { xs, ys, m })
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if x <= self.xs[0] {
            return self.ys[0] + self.slope(0, self.xs[0]) * (x - self.xs[0]);
        }
        if x >= self.xs[n - 1] {
            return self.ys[n - 1] + self.slope(n - 2, self.xs[n - 1]) * (x - self.xs[n - 1]);
        }
        let i = self.xs.partition_point(|&xi| xi <= x) - 1;
        self.eval_segment(i, x)
    }

    fn eval_segment(&self, i: usize, x: f64) -> f64 {
        let h = self.xs[i + 1] - self.xs[i];
        let a = (self.xs[i + 1] - x) / h;
        let b = (x - self.xs[i]) / h;
        a * self.ys[i]
            + b * self.ys[i + 1]
            + ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[i + 1]) * h * h / 6.0
    }

    fn slope(&self, i: usize, x: f64) -> f64 {
        let h = self.xs[i + 1] - self.xs[i];
        let a = (self.xs[i + 1] - x) / h;
        let b = (x - self.xs[i]) / h;
        (self.ys[i + 1] - self.ys[i]) / h
            + ((1.0 - 3.0 * a * a) * self.m[i] + (3.0 * b * b - 1.0) * self.m[i + 1]) * h / 6.0
    }

    pub fn points(&self) -> impl Iterator<Item = Point> + '_ {
        self.xs.iter().zip(&self.ys).map(|(&x, &y)| Point::new(x, y))
    }
}

/// Implicit shape given by a total membership predicate.
#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Circle { center: Point, radius: f64 },
    /// Ellipse with semi-axes `a` (along the rotated x axis) and `b`, rotated
    /// counter-clockwise by `angle` radians.
    Ellipse { center: Point, a: f64, b: f64, angle: f64 },
    /// Everything on or below the spline graph.
    BelowSpline(NaturalCubicSpline),
    Box(Aabb),
    Union(Vec<Shape>),
    Intersection(Vec<Shape>),
    Complement(Box<Shape>),
}

impl Shape {
    pub fn contains(&self, p: Point) -> bool {
        match self {
            Shape::Circle { center, radius } => {
                let dx = p.x - center.x;
                let dy = p.y - center.y;
                dx * dx + dy * dy <= radius * radius
            }
            Shape::Ellipse { center, a, b, angle } => {
                let (s, c) = libm::sincos(*angle);
                let dx = p.x - center.x;
                let dy = p.y - center.y;
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                (u / a) * (u / a) + (v / b) * (v / b) <= 1.0
            }
            Shape::BelowSpline(spline) => p.y <= spline.eval(p.x),
            Shape::Box(b) => b.contains(p),
            Shape::Union(parts) => parts.iter().any(|s| s.contains(p)),
            Shape::Intersection(parts) => parts.iter().all(|s| s.contains(p)),
            Shape::Complement(inner) => !inner.contains(p),
        }
    }

    /// Empty union, contains nothing.
    pub fn empty() -> Self {
        Shape::Union(Vec::new())
    }

    /// Empty intersection, contains everything.
    pub fn everything() -> Self {
        Shape::Intersection(Vec::new())
    }

    pub fn complement(self) -> Self {
        Shape::Complement(Box::new(self))
    }
}

/// Finite cell indicator: `1` on the physical domain, `eps` elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaField {
    physical: Shape,
    eps: f64,
}

impl AlphaField {
    pub fn new(physical: Shape, eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps < 1.0) {
            return Err(Error::invalid(format!("fictitious scaling must lie in (0, 1), got {eps}")));
        }
        Ok(Self { physical, eps })
    }

    /// Whole box is physical.
    pub fn full(eps: f64) -> Result<Self> {
        Self::new(Shape::everything(), eps)
    }

    /// Physical domain = box minus the union of `holes`.
    pub fn with_holes(holes: Vec<Shape>, eps: f64) -> Result<Self> {
        Self::new(Shape::Union(holes).complement(), eps)
    }

    pub fn shape(&self) -> &Shape {
        &self.physical
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn is_physical(&self, p: Point) -> bool {
        self.physical.contains(p)
    }

    pub fn alpha(&self, p: Point) -> f64 {
        if self.is_physical(p) {
            1.0
        } else {
            self.eps
        }
    }

    /// Same physical domain with additional holes carved out.
    pub fn subtract(&self, holes: Vec<Shape>) -> Self {
        let physical = Shape::Intersection(vec![self.physical.clone(), Shape::Union(holes).complement()]);
        Self { physical, eps: self.eps }
    }
}

/// A box counts as cut when the 5x5 corner/edge/center stencil disagrees.
pub fn is_cut(bounds: &Aabb, shape: &Shape) -> bool {
    let mut first = None;
    for j in 0..5 {
        let y = bounds.min.y + bounds.height() * j as f64 / 4.0;
        for i in 0..5 {
            let x = bounds.min.x + bounds.width() * i as f64 / 4.0;
            let inside = shape.contains(Point::new(x, y));
            match first {
                None => first = Some(inside),
                Some(f) if f != inside => return true,
                _ => {}
            }
        }
    }
    false
}

/// Deepest supported quadtree level.
pub const MAX_QUADTREE_DEPTH: u32 = 12;

/// Recursively splits cut boxes into quadrants up to `depth` levels. The
/// returned leaves tile `bounds` exactly.
pub fn quadtree_partition(bounds: Aabb, shape: &Shape, depth: u32) -> Vec<Aabb> {
    let mut leaves = Vec::new();
    let mut stack = vec![(bounds, 0u32)];
    let depth = depth.min(MAX_QUADTREE_DEPTH);
    while let Some((b, level)) = stack.pop() {
        if level < depth && is_cut(&b, shape) {
            for q in b.quadrants().into_iter().rev() {
                stack.push((q, level + 1));
            }
        } else {
            leaves.push(b);
        }
    }
    leaves
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

pub const MAX_GAUSS_ORDER: usize = 10;

pub fn gauss_legendre(q: usize) -> Result<GaussRule> {
    if q == 0 || q > MAX_GAUSS_ORDER {
        return Err(Error::invalid(format!(
            "Gauss order must be in 1..={MAX_GAUSS_ORDER}, got {q}"
        )));
    }
    let mut nodes = vec![0.0; q];
    let mut weights = vec![0.0; q];
    let n = q as f64;
    for i in 0..q.div_ceil(2) {
        // Newton on P_q starting from the Chebyshev-like guess
        let mut x = libm::cos(core::f64::consts::PI * (i as f64 + 0.75) / (n + 0.5));
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(q, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(q, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[q - 1 - i] = x;
        weights[i] = w;
        weights[q - 1 - i] = w;
    }
    if q % 2 == 1 {
        nodes[q / 2] = 0.0;
    }
    Ok(GaussRule { nodes, weights })
}

fn legendre(q: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=q {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = q as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// One integration point of a composed rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadPoint {
    pub point: Point,
    /// Area weight.
    pub weight: f64,
    pub alpha: f64,
    /// Active voxel the point belongs to.
    pub voxel: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureCell {
    pub bounds: Aabb,
    pub points: Vec<QuadPoint>,
}

impl QuadratureCell {
    pub fn total_weight(&self) -> f64 {
        self.points.iter().map(|p| p.weight).sum()
    }
}

/// Tensor Gauss-Legendre rule of order `q` mapped onto a box.
pub fn gauss_points(bounds: Aabb, q: usize) -> Result<QuadratureCell> {
    let rule = gauss_legendre(q)?;
    let mut points = Vec::with_capacity(q * q);
    push_gauss_points(&rule, &bounds, |p, w| {
        points.push(QuadPoint { point: p, weight: w, alpha: 1.0, voxel: 0 })
    });
    Ok(QuadratureCell { bounds, points })
}

fn push_gauss_points(rule: &GaussRule, b: &Aabb, mut sink: impl FnMut(Point, f64)) {
    let c = b.center();
    let hx = 0.5 * b.width();
    let hy = 0.5 * b.height();
    let scale = hx * hy;
    for (yn, yw) in rule.nodes.iter().zip(&rule.weights) {
        for (xn, xw) in rule.nodes.iter().zip(&rule.weights) {
            sink(Point::new(c.x + hx * xn, c.y + hy * yn), xw * yw * scale);
        }
    }
}

/// Voxel-level composed rule for one knot span: each voxel is partitioned by
/// the quadtree against the physical shape and every leaf gets a `q x q`
/// Gauss rule. Points carry `alpha` and the owning voxel id.
pub fn composed_rule(
    span: Aabb,
    alpha: &AlphaField,
    voxels: &[(usize, Aabb)],
    depth: u32,
    q: usize,
) -> Result<QuadratureCell> {
    let rule = gauss_legendre(q)?;
    let mut points = Vec::with_capacity(voxels.len() * q * q);
    for &(id, vbox) in voxels {
        for leaf in quadtree_partition(vbox, alpha.shape(), depth) {
            push_gauss_points(&rule, &leaf, |p, w| {
                points.push(QuadPoint { point: p, weight: w, alpha: alpha.alpha(p), voxel: id })
            });
        }
    }
    Ok(QuadratureCell { bounds: span, points })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> Aabb {
        Aabb::from_coords(0.0, 0.0, 1.0, 1.0)
    }

    #[test]
    fn uncut_boxes_stay_whole() {
        let inside = Shape::Circle { center: Point::new(0.5, 0.5), radius: 10.0 };
        assert_eq!(quadtree_partition(unit(), &inside, 3).len(), 1);
        let outside = Shape::Circle { center: Point::new(5.0, 5.0), radius: 1.0 };
        assert_eq!(quadtree_partition(unit(), &outside, 3).len(), 1);
    }

    #[test]
    fn vertical_line_depth_one() {
        let left = Shape::Box(Aabb::from_coords(-1.0, -1.0, 0.5, 2.0));
        assert_eq!(quadtree_partition(unit(), &left, 1).len(), 4);
        // deeper: only the two boxes touching x = 0.5 keep splitting
        assert!(quadtree_partition(unit(), &left, 3).len() > 4);
    }

    #[test]
    fn gauss_examples() {
        let c = gauss_points(unit(), 1).unwrap();
        assert_eq!(c.points.len(), 1);
        assert_eq!(c.points[0].point, Point::new(0.5, 0.5));
        assert!((c.points[0].weight - 1.0).abs() < 1e-15);

        let c = gauss_points(unit(), 2).unwrap();
        assert_eq!(c.points.len(), 4);
        assert!(c.points.iter().all(|p| (p.weight - 0.25).abs() < 1e-15));
        let integral: f64 = c.points.iter().map(|p| p.weight * p.point.x * p.point.x).sum();
        assert!((integral - 1.0 / 3.0).abs() < 1e-15);

        assert!(matches!(gauss_points(unit(), 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(gauss_points(unit(), 11), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn gauss_exactness_all_orders() {
        for q in 1..=MAX_GAUSS_ORDER {
            let r = gauss_legendre(q).unwrap();
            for deg in 0..2 * q {
                let exact = if deg % 2 == 1 { 0.0 } else { 2.0 / (deg as f64 + 1.0) };
                let got: f64 =
                    r.nodes.iter().zip(&r.weights).map(|(x, w)| w * libm::pow(*x, deg as f64)).sum();
                assert!((got - exact).abs() < 1e-14, "q={q} deg={deg}");
            }
        }
    }

    #[test]
    fn composed_rule_examples() {
        let span = unit();
        let voxels: Vec<(usize, Aabb)> =
            span.quadrants().iter().enumerate().map(|(i, b)| (i, *b)).collect();
        let full = AlphaField::full(1e-8).unwrap();
        let c = composed_rule(span, &full, &voxels, 5, 2).unwrap();
        assert_eq!(c.points.len(), 16);

        let void = AlphaField::new(Shape::empty(), 1e-8).unwrap();
        let c = composed_rule(span, &void, &voxels, 5, 2).unwrap();
        assert!(c.points.iter().all(|p| p.alpha == 1e-8));

        let hole = AlphaField::with_holes(
            vec![Shape::Circle { center: Point::new(0.3, 0.6), radius: 0.35 }],
            1e-8,
        )
        .unwrap();
        let c = composed_rule(span, &hole, &voxels, 2, 2).unwrap();
        assert!((c.total_weight() - 1.0).abs() < 1e-12);
        assert!(c.points.iter().any(|p| p.alpha < 1.0));
    }

    #[test]
    fn natural_spline_interpolates() {
        let pts = [
            Point::new(0.0, 10.0),
            Point::new(10.0, 1.0),
            Point::new(25.0, 7.5),
            Point::new(35.0, 2.0),
            Point::new(50.0, 15.0),
        ];
        let s = NaturalCubicSpline::new(&pts).unwrap();
        for p in pts {
            assert!((s.eval(p.x) - p.y).abs() < 1e-12);
        }
        // a straight line is reproduced exactly
        let line: Vec<Point> = (0..5).map(|i| Point::new(i as f64, 2.0 * i as f64 + 1.0)).collect();
        let s = NaturalCubicSpline::new(&line).unwrap();
        for k in 0..40 {
            let x = -0.5 + k as f64 * 0.13;
            assert!((s.eval(x) - (2.0 * x + 1.0)).abs() < 1e-12);
        }
        assert!(NaturalCubicSpline::new(&[Point::new(1.0, 0.0), Point::new(1.0, 1.0)]).is_err());
    }

    #[test]
    fn alpha_values() {
        let a = AlphaField::with_holes(vec![Shape::Circle { center: Point::new(0.0, 0.0), radius: 1.0 }], 1e-5)
            .unwrap();
        assert_eq!(a.alpha(Point::new(0.0, 0.5)), 1e-5);
        assert_eq!(a.alpha(Point::new(2.0, 0.5)), 1.0);
        assert!(AlphaField::full(0.0).is_err());
        assert!(AlphaField::full(1.0).is_err());
    }
}
