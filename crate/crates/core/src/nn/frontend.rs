use super::layers::Linear;
use crate::autodiff::{Scope, Tensor};
use crate::error::{Result, SluError};

pub fn subsampled_len(t: usize, factor: usize) -> usize {
    t.div_ceil(factor)
}

/// Stacks each run of `factor` frames (zero-padding the last run) and projects
/// the stacked rows with `proj`, mapping `[T × f]` to `[⌈T/factor⌉ × d]`.
pub fn subsample(scope: &Scope, proj: &Linear, x: &Tensor, factor: usize) -> Result<Tensor> {
    let (t, f) = x.dims2()?;
    if factor == 0 {
        return Err(SluError::invalid("subsampling factor must be at least 1"));
    }
    if t < factor {
        return Err(SluError::invalid(format!("{t} frames cannot be subsampled by {factor}")));
    }
    let out_len = subsampled_len(t, factor);
    let padded = if out_len * factor == t {
        x.clone()
    } else {
        let pad = Tensor::zeros(&[out_len * factor - t, f])?;
        Tensor::concat(&[x.clone(), pad], 0)?
    };
    let stacked = if factor == 1 { padded } else { padded.reshape(&[out_len, factor * f])? };
    proj.forward(scope, &stacked)
}

/// Sinusoidal position table `[len × d]`.
pub fn position_encoding(len: usize, d: usize) -> Result<Tensor> {
    let mut v = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * freq;
            v[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(v, &[len, d])
}

pub fn add_positions(x: &Tensor) -> Result<Tensor> {
    let (len, d) = x.dims2()?;
    x.add(&position_encoding(len, d)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn proj(f: usize, factor: usize, d: usize) -> (ParamStore, Linear) {
        let mut store = ParamStore::new();
        let l = Linear::new(&mut store, "sub", f * factor, d, true, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        (store, l)
    }

    #[test]
    fn factor_one_is_projection() {
        let (store, l) = proj(3, 1, 4);
        let scope = Scope::eval(&store);
        let x = Tensor::new((0..15).map(f64::from).collect(), &[5, 3]).unwrap();
        let y = subsample(&scope, &l, &x, 1).unwrap();
        assert_eq!(y.data(), l.forward(&scope, &x).unwrap().data());
        assert_eq!(y.shape(), &[5, 4]);
    }

    #[test]
    fn hundred_by_four_gives_25() {
        let (store, l) = proj(2, 4, 8);
        let x = Tensor::zeros(&[100, 2]).unwrap();
        assert_eq!(subsample(&Scope::eval(&store), &l, &x, 4).unwrap().shape(), &[25, 8]);
    }

    #[test]
    fn length_law_sweep() {
        for factor in 1..=4 {
            let (store, l) = proj(2, factor, 3);
            let scope = Scope::eval(&store);
            for t in 1..=50 {
                let x = Tensor::new(vec![0.5; t * 2], &[t, 2]).unwrap();
                match subsample(&scope, &l, &x, factor) {
                    Ok(y) => {
                        assert!(t >= factor);
                        assert_eq!(y.shape()[0], t.div_ceil(factor));
                    }
                    Err(_) => assert!(t < factor),
                }
            }
        }
    }

    #[test]
    fn positions_are_bounded_and_distinct() {
        let p = position_encoding(20, 8).unwrap();
        assert!(p.data().iter().all(|v| v.abs() <= 1.0));
        assert_eq!(&p.data()[..2], &[0.0, 1.0]);
        assert_ne!(p.data()[8..16], p.data()[16..24]);
    }
}
