//! Flattened network parameters and their gradients.
//!
//! A [`ParamVector`] stores every weight and bias of a dense network in one
//! contiguous buffer. The [`Layout`] records where each layer's segments live
//! and which suffix of layers forms the tail block whose gradient norm drives
//! loss weighting (by default the final layer).

use std::ops::Range;
use std::sync::Arc;

use rand::Rng;

use super::mlp::MlpSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Weight,
    Bias,
}

/// One contiguous block of the parameter buffer.
///
/// Weights are stored `(fan_in, fan_out)` row-major so a layer computes
/// `X · W + b`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub layer: usize,
    pub kind: SegmentKind,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Marks a suffix of layers, starting at `first_layer`, as the tail block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TailMarker {
    pub first_layer: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    segments: Vec<Segment>,
    len: usize,
    num_layers: usize,
    tail: TailMarker,
}

impl Layout {
    /// Layout for `spec` with the tail set to the final layer.
    pub fn for_spec(spec: &MlpSpec) -> Self {
        let mut segments = Vec::with_capacity(2 * spec.num_layers());
        let mut offset = 0;
        for (layer, pair) in spec.widths().windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            for (kind, rows) in [(SegmentKind::Weight, fan_in), (SegmentKind::Bias, 1)] {
                let seg = Segment {
                    layer,
                    kind,
                    rows,
                    cols: fan_out,
                    offset,
                };
                offset += seg.len();
                segments.push(seg);
            }
        }
        let num_layers = spec.num_layers();
        Self {
            segments,
            len: offset,
            num_layers,
            tail: TailMarker {
                first_layer: num_layers - 1,
            },
        }
    }

    /// Same layout with the tail widened to layers `first_layer..`.
    pub fn with_tail(mut self, first_layer: usize) -> Result<Self> {
        let marker = TailMarker { first_layer };
        self.tail_range(marker)?;
        self.tail = marker;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, layer: usize, kind: SegmentKind) -> Option<&Segment> {
        self.segments
            .iter()
            .find(|s| s.layer == layer && s.kind == kind)
    }

    pub fn tail(&self) -> TailMarker {
        self.tail
    }

    /// Buffer range covered by the layers selected by `marker`.
    pub fn tail_range(&self, marker: TailMarker) -> Result<Range<usize>> {
        if marker.first_layer >= self.num_layers {
            return Err(Error::UnknownSegment(format!(
                "tail starts at layer {} but the layout has {} layers",
                marker.first_layer, self.num_layers
            )));
        }
        let start = self
            .segment(marker.first_layer, SegmentKind::Weight)
            .map(|s| s.offset)
            .expect("every layer has a weight segment");
        Ok(start..self.len)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: Arc<Layout>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::LayoutMismatch(format!(
                "{} values for a layout of {}",
                values.len(),
                layout.len()
            )));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        Self {
            values: vec![0.0; layout.len()],
            layout,
        }
    }

    /// Uniform Glorot initialization of weights, zero biases.
    pub fn glorot<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> Self {
        let layout = Arc::new(Layout::for_spec(spec));
        let mut values = vec![0.0; layout.len()];
        for seg in layout.segments() {
            if seg.kind == SegmentKind::Weight {
                let bound = (6.0 / (seg.rows + seg.cols) as f64).sqrt();
                for v in &mut values[seg.range()] {
                    *v = rng.random_range(-bound..=bound);
                }
            }
        }
        Self { values, layout }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment_values(&self, seg: &Segment) -> &[f64] {
        &self.values[seg.range()]
    }

    /// Replaces the tail marker while keeping the values.
    pub fn with_tail(self, first_layer: usize) -> Result<Self> {
        let layout = Arc::new((*self.layout).clone().with_tail(first_layer)?);
        Ok(Self {
            values: self.values,
            layout,
        })
    }

    /// `self - step * grad`, in place.
    pub fn descend(&mut self, grad: &Gradient, step: f64) -> Result<()> {
        check_same_layout(&self.layout, grad.layout())?;
        for (v, g) in self.values.iter_mut().zip(grad.values()) {
            *v -= step * g;
        }
        Ok(())
    }

    pub fn l2_norm(&self) -> f64 {
        l2(&self.values)
    }
}

/// Gradient of a scalar with respect to a [`ParamVector`]; same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl Gradient {
    pub fn new(values: Vec<f64>, layout: Arc<Layout>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::LayoutMismatch(format!(
                "{} gradient entries for a layout of {}",
                values.len(),
                layout.len()
            )));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        Self {
            values: vec![0.0; layout.len()],
            layout,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        l2(&self.values)
    }

    /// Accumulates `scale * other` into `self`.
    pub fn add_scaled(&mut self, other: &Gradient, scale: f64) -> Result<()> {
        check_same_layout(&self.layout, &other.layout)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }
}

/// ℓ2 norm of the gradient entries belonging to the tail block `tail`.
pub fn restricted_norm(grad: &Gradient, tail: TailMarker) -> Result<f64> {
    let range = grad.layout().tail_range(tail)?;
    Ok(l2(&grad.values()[range]))
}

pub(crate) fn check_same_layout(a: &Layout, b: &Layout) -> Result<()> {
    if a.segments != b.segments {
        return Err(Error::LayoutMismatch(
            "parameter and gradient layouts differ".into(),
        ));
    }
    Ok(())
}

fn l2(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}
