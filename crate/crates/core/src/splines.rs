//! Open uniform B-spline bases and their bivariate tensor products.
//!
//! Knots are stored directly in physical coordinates, so derivatives come out
//! in units of 1/length without any extra mapping.

use alloc::format;
use alloc::vec::Vec;

use crate::geometry::Point;
use crate::{Error, Result};

/// Highest polynomial degree supported by the fixed-size span evaluations.
pub const MAX_DEGREE: usize = 8;
const MAX_ORDER: usize = MAX_DEGREE + 1;

/// Open knot vector with uniform interior knots of multiplicity one.
#[derive(Debug, Clone, PartialEq)]
pub struct KnotVector {
    degree: usize,
    spans: usize,
    length: f64,
    knots: Vec<f64>,
}

/// The `p + 1` basis functions that are non-zero on one knot span.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpanEvaluation {
    /// Span index; the supported functions are `span..=span + degree`.
    pub span: usize,
    degree: usize,
    values: [f64; MAX_ORDER],
    derivs: [f64; MAX_ORDER],
}

impl SpanEvaluation {
    pub fn values(&self) -> &[f64] {
        &self.values[..=self.degree]
    }

    pub fn derivs(&self) -> &[f64] {
        &self.derivs[..=self.degree]
    }

    /// Global index of the first non-zero basis function.
    pub fn first_basis(&self) -> usize {
        self.span
    }
}

/// Builds an open knot vector on `[0, length]` with `num_spans` equal spans.
pub fn open_knot_vector(num_spans: usize, degree: usize, length: f64) -> Result<KnotVector> {
    KnotVector::open_uniform(num_spans, degree, length)
}

impl KnotVector {
    pub fn open_uniform(num_spans: usize, degree: usize, length: f64) -> Result<Self> {
        if num_spans == 0 {
            return Err(Error::invalid("knot vector needs at least one span"));
        }
        if !(length > 0.0) || !length.is_finite() {
            return Err(Error::invalid(format!("knot vector length must be positive, got {length}")));
        }
        if degree == 0 || degree > MAX_DEGREE {
            return Err(Error::invalid(format!(
                "degree must be in 1..={MAX_DEGREE}, got {degree}"
            )));
        }
        let h = length / num_spans as f64;
        let mut knots = Vec::with_capacity(num_spans + 2 * degree + 1);
        knots.extend(core::iter::repeat_n(0.0, degree));
        for i in 0..=num_spans {
            knots.push(if i == num_spans { length } else { i as f64 * h });
        }
        knots.extend(core::iter::repeat_n(length, degree));
        Ok(Self { degree, spans: num_spans, length, knots })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Number of basis functions, `len(knots) - p - 1`.
    pub fn num_basis(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    pub fn num_spans(&self) -> usize {
        self.spans
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn span_length(&self) -> f64 {
        self.length / self.spans as f64
    }

    /// Left end of a knot span.
    pub fn span_start(&self, span: usize) -> f64 {
        self.knots[span + self.degree]
    }

    /// Span containing `x`. Interior knots belong to the span on their right,
    /// the last knot to the final span.
    pub fn find_span(&self, x: f64) -> Result<usize> {
        if !(x >= 0.0 && x <= self.length) {
            return Err(Error::out_of_range(format!(
                "coordinate {x} outside [0, {}]",
                self.length
            )));
        }
        let mut span = libm::floor(x / self.span_length()) as usize;
        if span >= self.spans {
            span = self.spans - 1;
        }
        // guard against the division landing one span off near a knot
        let k = span + self.degree;
        if x < self.knots[k] && span > 0 {
            span -= 1;
        } else if span + 1 < self.spans && x >= self.knots[k + 1] {
            span += 1;
        }
        Ok(span)
    }

    pub fn eval_span(&self, x: f64) -> Result<SpanEvaluation> {
        let span = self.find_span(x)?;
        Ok(self.eval_in_span(span, x))
    }

    /// Cox-de Boor evaluation of the functions supported on `span` together
    /// with their first derivatives. `x` is not range-checked.
    pub fn eval_in_span(&self, span: usize, x: f64) -> SpanEvaluation {
        let p = self.degree;
        let k = span + p;
        let u = &self.knots;

        // ndu[j] holds the degree-r functions k-r..=k after stage r.
        let mut ndu = [0.0; MAX_ORDER];
        let mut lower = [0.0; MAX_ORDER];
        let mut left = [0.0; MAX_ORDER];
        let mut right = [0.0; MAX_ORDER];
        ndu[0] = 1.0;
        for r in 1..=p {
            left[r] = x - u[k + 1 - r];
            right[r] = u[k + r] - x;
            if r == p {
                lower[..p].copy_from_slice(&ndu[..p]);
            }
            let mut saved = 0.0;
            for j in 0..r {
                let temp = ndu[j] / (right[j + 1] + left[r - j]);
                ndu[j] = saved + right[j + 1] * temp;
                saved = left[r - j] * temp;
            }
            ndu[r] = saved;
        }

        let mut derivs = [0.0; MAX_ORDER];
        let pf = p as f64;
        for j in 0..=p {
            let i = k - p + j;
            let mut d = 0.0;
            if j >= 1 {
                d += lower[j - 1] / (u[i + p] - u[i]);
            }
            if j < p {
                d -= lower[j] / (u[i + p + 1] - u[i + 1]);
            }
            derivs[j] = pf * d;
        }

        SpanEvaluation { span, degree: p, values: ndu, derivs }
    }
}

/// Bivariate tensor-product basis; global index `ix + nx * iy`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBasis {
    pub x: KnotVector,
    pub y: KnotVector,
}

/// Non-zero basis functions at one point.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Footprint {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
    /// `[dN/dx, dN/dy]` per entry.
    pub gradients: Vec<[f64; 2]>,
}

impl TensorBasis {
    pub fn new(x: KnotVector, y: KnotVector) -> Result<Self> {
        if x.degree() != y.degree() {
            return Err(Error::invalid("x and y knot vectors must share the degree"));
        }
        Ok(Self { x, y })
    }

    /// Uniform basis with square-ish spans on `[0, lx] x [0, ly]`.
    pub fn uniform(spans_x: usize, spans_y: usize, degree: usize, lx: f64, ly: f64) -> Result<Self> {
        Self::new(
            KnotVector::open_uniform(spans_x, degree, lx)?,
            KnotVector::open_uniform(spans_y, degree, ly)?,
        )
    }

    pub fn degree(&self) -> usize {
        self.x.degree()
    }

    pub fn nx(&self) -> usize {
        self.x.num_basis()
    }

    pub fn ny(&self) -> usize {
        self.y.num_basis()
    }

    pub fn num_dofs(&self) -> usize {
        self.nx() * self.ny()
    }

    /// `(p + 1)^2`
    pub fn local_size(&self) -> usize {
        let q = self.degree() + 1;
        q * q
    }

    pub fn index(&self, ix: usize, iy: usize) -> usize {
        ix + self.nx() * iy
    }

    pub fn spans(&self) -> (usize, usize) {
        (self.x.num_spans(), self.y.num_spans())
    }

    pub fn span_size(&self) -> (f64, f64) {
        (self.x.span_length(), self.y.span_length())
    }

    pub fn extent(&self) -> (f64, f64) {
        (self.x.length(), self.y.length())
    }

    /// Global indices of the `(p + 1)^2` functions supported on a span, in
    /// local order `a + (p + 1) * b`.
    pub fn span_dofs(&self, sx: usize, sy: usize) -> Vec<usize> {
        let q = self.degree() + 1;
        let mut out = Vec::with_capacity(q * q);
        for b in 0..q {
            for a in 0..q {
                out.push(self.index(sx + a, sy + b));
            }
        }
        out
    }

    pub fn footprint(&self, point: Point) -> Result<Footprint> {
        let ex = self.x.eval_span(point.x)?;
        let ey = self.y.eval_span(point.y)?;
        Ok(self.combine(&ex, &ey))
    }

    pub(crate) fn combine(&self, ex: &SpanEvaluation, ey: &SpanEvaluation) -> Footprint {
        let q = self.degree() + 1;
        let mut fp = Footprint {
            indices: Vec::with_capacity(q * q),
            values: Vec::with_capacity(q * q),
            gradients: Vec::with_capacity(q * q),
        };
        for b in 0..q {
            for a in 0..q {
                fp.indices.push(self.index(ex.span + a, ey.span + b));
                fp.values.push(ex.values[a] * ey.values[b]);
                fp.gradients.push([ex.derivs[a] * ey.values[b], ex.values[a] * ey.derivs[b]]);
            }
        }
        fp
    }

    /// Evaluates `sum_i N_i(x) c_i` at a point.
    pub fn evaluate(&self, coeffs: &[f64], point: Point) -> Result<f64> {
        let fp = self.footprint(point)?;
        Ok(fp.indices.iter().zip(&fp.values).map(|(&i, &v)| coeffs[i] * v).sum())
    }

    /// Symmetric permutation (new -> old) that orders the shorter grid
    /// direction fastest, which keeps the envelope of the banded mass matrix
    /// at roughly `p * min(nx, ny)`.
    pub fn envelope_permutation(&self) -> Vec<usize> {
        let (nx, ny) = (self.nx(), self.ny());
        if ny < nx {
            let mut perm = Vec::with_capacity(nx * ny);
            for ix in 0..nx {
                for iy in 0..ny {
                    perm.push(self.index(ix, iy));
                }
            }
            perm
        } else {
            (0..nx * ny).collect()
        }
    }
}
