use std::fmt;

/// Dense row-major array of `f64`.
///
/// Feature grids use the shape `[height, width, channels]`, so element
/// `(x, y, c)` lives at `(y * width + x) * channels + c`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![v; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    /// A `width x height x channels` feature grid of zeros.
    pub fn grid(width: usize, height: usize, channels: usize) -> Self {
        Self::zeros(vec![height, width, channels])
    }

    pub fn grid_from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self { shape: vec![height, width, channels], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    fn grid_dims(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "not a feature grid: {:?}", self.shape);
        (self.shape[1], self.shape[0], self.shape[2])
    }

    pub fn width(&self) -> usize {
        self.grid_dims().0
    }

    pub fn height(&self) -> usize {
        self.grid_dims().1
    }

    pub fn channels(&self) -> usize {
        self.grid_dims().2
    }

    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        let (w, _, ch) = self.grid_dims();
        self.data[(y * w + x) * ch + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let (w, _, ch) = self.grid_dims();
        self.data[(y * w + x) * ch + c] = v;
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
