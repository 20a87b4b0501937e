use super::Real;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|x| U::from(*x).expect("finite cast"))
                .collect(),
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let w = self.shape[1];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let w = self.shape[1];
        &mut self.data[i * w..(i + 1) * w]
    }
}

/// `x[rows × n_in] · w[n_in × n_out] + b`.
pub(crate) fn linear<T: Real>(x: &[T], rows: usize, w: &Tensor<T>, b: &Tensor<T>) -> Vec<T> {
    let (n_in, n_out) = (w.shape[0], w.shape[1]);
    debug_assert_eq!(x.len(), rows * n_in);
    let mut out = Vec::with_capacity(rows * n_out);
    for r in 0..rows {
        out.extend_from_slice(&b.data);
        let o = &mut out[r * n_out..(r + 1) * n_out];
        for (i, &xi) in x[r * n_in..(r + 1) * n_in].iter().enumerate() {
            for (oj, &wij) in o.iter_mut().zip(w.row(i)) {
                *oj = *oj + xi * wij;
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients of [`linear`] and returns `dx`.
pub(crate) fn linear_backward<T: Real>(
    x: &[T],
    rows: usize,
    w: &Tensor<T>,
    dout: &[T],
    dw: &mut Tensor<T>,
    db: &mut Tensor<T>,
) -> Vec<T> {
    let (n_in, n_out) = (w.shape[0], w.shape[1]);
    let mut dx = vec![T::zero(); rows * n_in];
    for r in 0..rows {
        let d = &dout[r * n_out..(r + 1) * n_out];
        for (dbj, &dj) in db.data.iter_mut().zip(d) {
            *dbj = *dbj + dj;
        }
        let xr = &x[r * n_in..(r + 1) * n_in];
        let dxr = &mut dx[r * n_in..(r + 1) * n_in];
        for i in 0..n_in {
            let wi = w.row(i);
            let mut acc = T::zero();
            for (&wij, &dj) in wi.iter().zip(d) {
                acc = acc + wij * dj;
            }
            dxr[i] = acc;
            let xi = xr[i];
            for (g, &dj) in dw.row_mut(i).iter_mut().zip(d) {
                *g = *g + xi * dj;
            }
        }
    }
    dx
}

pub(crate) fn add_into<T: Real>(acc: &mut [T], x: &[T]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a = *a + b;
    }
}
