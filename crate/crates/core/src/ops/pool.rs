use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// 2×2 / stride-2 max pooling. Returns the output and, per output element,
/// the flat input index of its maximum (first occurrence in row-major order).
pub fn max_pool2d<T: Element>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let (n, c, h, w) = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "max_pool2d needs even spatial extents, got {h}x{w}"
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for r in 0..ho {
            for col in 0..wo {
                let top = base + 2 * r * w + 2 * col;
                let mut best = top;
                for cand in [top + 1, top + w, top + w + 1] {
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                out.push(x[best]);
                argmax.push(best as u32);
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, ho, wo], out), argmax))
}

pub fn max_pool2d_backward<T: Element>(input_shape: &[usize], argmax: &[u32], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = vec![T::ZERO; input_shape.iter().product()];
    for (&idx, &g) in argmax.iter().zip(dy.data()) {
        dx[idx as usize] += g;
    }
    Tensor::from_parts(input_shape.to_vec(), dx)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest<T: Element>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    if factor == 0 {
        return Err(Error::InvalidArgument("upsample factor must be positive".into()));
    }
    let (ho, wo) = (h * factor, w * factor);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        for r in 0..ho {
            let row = &src[(r / factor) * w..(r / factor + 1) * w];
            for col in 0..wo {
                out.push(row[col / factor]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, ho, wo], out))
}

pub fn upsample_nearest_backward<T: Element>(input_shape: &[usize], factor: usize, dy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (ho, wo) = (h * factor, w * factor);
    let mut dx = vec![T::ZERO; input_shape.iter().product()];
    for (plane, g) in dy.data().chunks(ho * wo).enumerate() {
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        for r in 0..ho {
            for col in 0..wo {
                dst[(r / factor) * w + col / factor] += g[r * wo + col];
            }
        }
    }
    Tensor::from_parts(input_shape.to_vec(), dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use rand::Rng;

    #[test]
    fn constant_image_halves() {
        let x = Tensor::<f32>::full(vec![1, 2, 4, 6], 3.0).unwrap();
        let (y, _) = max_pool2d(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 3]);
        assert!(y.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn single_window_routes_gradient_to_unique_max() {
        let x = Tensor::<f64>::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = max_pool2d(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let dx = max_pool2d_backward(x.shape(), &arg, &Tensor::scalar(1.0).reshape(vec![1, 1, 1, 1]).unwrap());
        assert_eq!(dx.data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn ties_pick_first_row_major() {
        let x = Tensor::<f64>::new(vec![1, 1, 2, 2], vec![0.0, 5.0, 5.0, 5.0]).unwrap();
        let (_, arg) = max_pool2d(&x).unwrap();
        assert_eq!(arg, vec![1]);
    }

    #[test]
    fn odd_extent_rejected() {
        assert!(max_pool2d(&Tensor::<f32>::zeros(vec![1, 1, 3, 4]).unwrap()).is_err());
    }

    #[test]
    fn random_8x8_matches_window_scan() {
        let mut rng = RngStream::new(11).rng();
        let x = Tensor::<f64>::new(vec![1, 1, 8, 8], (0..64).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let (y, _) = max_pool2d(&x).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let mut m = f64::NEG_INFINITY;
                for i in 0..2 {
                    for j in 0..2 {
                        m = m.max(x.data()[(2 * r + i) * 8 + 2 * c + j]);
                    }
                }
                assert_eq!(y.data()[r * 4 + c], m);
            }
        }
    }

    #[test]
    fn upsample_replicates_blocks() {
        let x = Tensor::<f32>::new(vec![1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let y = upsample_nearest(&x, 2).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        let dx = upsample_nearest_backward(x.shape(), 2, &Tensor::full(vec![1, 1, 2, 4], 1.0).unwrap());
        assert_eq!(dx.data(), &[4.0, 4.0]);
    }
}
