use crate::error::{shape_err, Result};
use crate::scalar::{axpy, dot, Scalar};
use crate::tensor::Tensor;

/// `y = x·Wᵀ + b` for `x: [B, Din]`, `W: [Dout, Din]`, `b: [Dout]`.
pub fn linear<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let [rows, din] = input.dims2()?;
    let [dout, wdin] = weight.dims2()?;
    if din != wdin || bias.len() != dout {
        return Err(shape_err!(
            "linear: input {:?}, weight {:?}, bias {:?}",
            input.shape(),
            weight.shape(),
            bias.shape()
        ));
    }
    let (x, w, b) = (input.data(), weight.data(), bias.data());
    let mut out = Vec::with_capacity(rows * dout);
    for r in 0..rows {
        let xr = &x[r * din..(r + 1) * din];
        for o in 0..dout {
            out.push(dot(xr, &w[o * din..(o + 1) * din]) + b[o]);
        }
    }
    Tensor::from_vec(&[rows, dout], out)
}

/// Gradients `(dx, dW, db)`; `dx` is skipped when `need_input` is false.
pub fn linear_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let [rows, din] = input.dims2()?;
    let [dout, _] = weight.dims2()?;
    if grad_out.shape() != [rows, dout] {
        return Err(shape_err!("linear upstream gradient has shape {:?}", grad_out.shape()));
    }
    let (dy, x, w) = (grad_out.data(), input.data(), weight.data());
    let mut dw = vec![T::zero(); dout * din];
    let mut db = vec![T::zero(); dout];
    for r in 0..rows {
        let xr = &x[r * din..(r + 1) * din];
        for o in 0..dout {
            let g = dy[r * dout + o];
            db[o] += g;
            if g != T::zero() {
                axpy(g, xr, &mut dw[o * din..(o + 1) * din]);
            }
        }
    }
    let dx = if need_input {
        let mut dx = vec![T::zero(); rows * din];
        for r in 0..rows {
            let dxr = &mut dx[r * din..(r + 1) * din];
            for o in 0..dout {
                axpy(dy[r * dout + o], &w[o * din..(o + 1) * din], dxr);
            }
        }
        Some(Tensor::from_vec(&[rows, din], dx)?)
    } else {
        None
    };
    Ok((dx, Tensor::from_vec(&[dout, din], dw)?, Tensor::from_vec(&[dout], db)?))
}
