use crate::error::{Error, Result};
use crate::numerics::{Real, Rng, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Named parameter tensors packed into one flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<R: Real = f32> {
    entries: Vec<ParamEntry>,
    data: Vec<R>,
}

/// Trained network weights.
pub type Weights = Params<f32>;

/// Handle to one parameter tensor inside a [`Params`] buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Builder that assigns offsets and records initializers.
#[derive(Debug, Default)]
pub(crate) struct Layout {
    pub entries: Vec<ParamEntry>,
    pub init: Vec<Init>,
    next: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    Zeros,
    Ones,
    /// Normal with standard deviation `1/sqrt(fan_in)`.
    Fan(usize),
}

impl Layout {
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        let entry = ParamEntry {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.next,
        };
        self.next += entry.len();
        self.entries.push(entry);
        self.init.push(init);
        ParamId(self.entries.len() - 1)
    }

    pub fn total(&self) -> usize {
        self.next
    }
}

impl<R: Real> Params<R> {
    pub(crate) fn initialize(layout: &Layout, rng: &mut Rng) -> Self {
        let mut data = vec![R::zero(); layout.total()];
        for (entry, init) in layout.entries.iter().zip(&layout.init) {
            let slot = &mut data[entry.range()];
            match *init {
                Init::Zeros => {}
                Init::Ones => slot.iter_mut().for_each(|v| *v = R::one()),
                Init::Fan(fan_in) => {
                    let std = 1.0 / (fan_in.max(1) as f64).sqrt();
                    slot.iter_mut().for_each(|v| *v = R::lit(std * rng.normal()));
                }
            }
        }
        Self {
            entries: layout.entries.clone(),
            data,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self.entries.clone(),
            data: vec![R::zero(); self.data.len()],
        }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn slice(&self, id: ParamId) -> &[R] {
        &self.data[self.entries[id.0].range()]
    }

    pub fn slice_mut(&mut self, id: ParamId) -> &mut [R] {
        let range = self.entries[id.0].range();
        &mut self.data[range]
    }

    pub fn by_name(&self, name: &str) -> Option<&[R]> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| &self.data[e.range()])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut [R]> {
        let range = self.entries.iter().find(|e| e.name == name)?.range();
        Some(&mut self.data[range])
    }

    pub fn tensor(&self, index: usize) -> Tensor<R> {
        let e = &self.entries[index];
        Tensor::from_parts(e.shape.clone(), self.data[e.range()].to_vec())
    }

    pub fn cast<S: Real>(&self) -> Params<S> {
        Params {
            entries: self.entries.clone(),
            data: self.data.iter().map(|v| S::lit(v.as_f64())).collect(),
        }
    }

    /// Replaces the buffer with tensors looked up by entry name.
    pub fn fill_from(&mut self, mut lookup: impl FnMut(&str) -> Option<Tensor<R>>) -> Result<()> {
        for e in &self.entries {
            let t = lookup(&e.name)
                .ok_or_else(|| Error::CorruptArchive(format!("missing weight `{}`", e.name)))?;
            if t.shape() != e.shape.as_slice() {
                return Err(Error::CorruptArchive(format!(
                    "weight `{}` has shape {:?}, expected {:?}",
                    e.name,
                    t.shape(),
                    e.shape
                )));
            }
            self.data[e.range()].copy_from_slice(t.data());
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
