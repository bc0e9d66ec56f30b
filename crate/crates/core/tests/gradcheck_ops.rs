use rand::Rng;
use rand_distr::StandardNormal;
use stochff::autodiff::{Graph, Parameter, Var};
use stochff::goodness::{dc_objective, haar_basis, Supervision};
use stochff::gradcheck::finite_diff_check;
use stochff::ops::{BatchNormState, Conv2dSpec, Mode, PoolMode, PoolSpec};
use stochff::seeds::stream;
use stochff::{Result, Tensor64};

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn normal(shape: &[usize], seed: u64) -> Tensor64 {
    let mut rng = stream(seed, &[]);
    let n = shape.iter().product();
    Tensor64::from_vec(shape, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).unwrap()
}

/// `Σ c ⊙ y` with fixed random weights `c`, so every output coordinate matters.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let c = g.input(normal(&shape, seed ^ 0xc0ffee));
    let n = shape.iter().product::<usize>();
    let y2 = g.reshape(y, &[1, n])?;
    let c2 = g.reshape(c, &[1, n])?;
    let b = g.input(Tensor64::zeros(&[1]));
    let dot = g.linear(y2, c2, b)?;
    g.sum(dot)
}

fn check<F>(name: &str, value: Tensor64, f: F)
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let p = Parameter::new(name, value);
    let err = finite_diff_check(f, &p, H).unwrap();
    assert!(err < TOL, "{name}: relative error {err:e}");
}

#[test]
fn conv2d_gradients() {
    for (seed, groups, stride, padding) in [(1, 1, 1, 0), (2, 2, 1, 1), (3, 3, 2, 1), (4, 1, 2, 2)] {
        let spec = Conv2dSpec { stride, padding, groups };
        let cin_g = if groups == 1 { 3 } else { 2 };
        let x = normal(&[2, groups * cin_g, 6, 5], seed);
        let w = normal(&[groups * 2, cin_g, 3, 3], seed + 10);
        let (xc, wc) = (x.clone(), w.clone());
        check("conv.x", x.clone(), |g, v| {
            let w = g.input(wc.clone());
            let y = g.conv2d(v, w, spec)?;
            weighted_sum(g, y, seed)
        });
        check("conv.w", w, |g, v| {
            let x = g.input(xc.clone());
            let y = g.conv2d(x, v, spec)?;
            weighted_sum(g, y, seed)
        });
    }
}

#[test]
fn conv_block_gradients() {
    let pools = [
        PoolSpec { mode: PoolMode::Max, kernel: 4, stride: 2, padding: 1 },
        PoolSpec { mode: PoolMode::Avg, kernel: 2, stride: 2, padding: 0 },
        PoolSpec { mode: PoolMode::Max, kernel: 2, stride: 1, padding: 0 },
    ];
    for (i, pool) in pools.into_iter().enumerate() {
        for (groups, cin, cout) in [(1, 2, 3), (2, 2, 8), (3, 3, 6)] {
            let seed = 100 + i as u64 * 10 + groups as u64;
            let conv = Conv2dSpec { stride: 1, padding: 1, groups };
            let x = normal(&[2, cin, 7, 6], seed);
            let w = normal(&[cout, cin / groups, 3, 3], seed + 1);
            let (xc, wc) = (x.clone(), w.clone());
            check("block.x", x, |g, v| {
                let w = g.input(wc.clone());
                let y = g.conv_block(v, w, conv, pool)?;
                weighted_sum(g, y, seed)
            });
            check("block.w", w, |g, v| {
                let x = g.input(xc.clone());
                let y = g.conv_block(x, v, conv, pool)?;
                weighted_sum(g, y, seed)
            });
        }
    }
}

#[test]
fn pool_relu_square_gradients() {
    for (seed, pool) in [
        (1, PoolSpec { mode: PoolMode::Max, kernel: 3, stride: 2, padding: 1 }),
        (2, PoolSpec { mode: PoolMode::Avg, kernel: 3, stride: 2, padding: 1 }),
        (3, PoolSpec { mode: PoolMode::Avg, kernel: 2, stride: 2, padding: 0 }),
    ] {
        check("pool", normal(&[2, 2, 6, 7], seed), |g, v| {
            let y = g.pool2d(v, pool)?;
            weighted_sum(g, y, seed)
        });
    }
    check("relu", normal(&[3, 4], 5), |g, v| {
        let y = g.relu(v)?;
        weighted_sum(g, y, 5)
    });
    check("square", normal(&[3, 4], 6), |g, v| {
        let y = g.square(v)?;
        weighted_sum(g, y, 6)
    });
}

#[test]
fn batchnorm_gradients() {
    for mode in [Mode::Train, Mode::Eval] {
        check("bn", normal(&[4, 3, 3, 2], 7), |g, v| {
            let mut st = BatchNormState::new(3);
            st.running_var = vec![0.5, 2.0, 1.5];
            st.running_mean = vec![0.1, -0.3, 0.0];
            let y = g.batchnorm2d(v, &mut st, mode)?;
            weighted_sum(g, y, 7)
        });
    }
}

#[test]
fn linear_and_cross_entropy_gradients() {
    let (x, w, b) = (normal(&[5, 4], 8), normal(&[3, 4], 9), normal(&[3], 10));
    let labels = [0, 2, 1, 1, 0];
    let (wc, bc, xc) = (w.clone(), b.clone(), x.clone());
    check("linear.x", x.clone(), |g, v| {
        let (w, b) = (g.input(wc.clone()), g.input(bc.clone()));
        let y = g.linear(v, w, b)?;
        g.softmax_cross_entropy(y, &labels)
    });
    check("linear.w", w.clone(), |g, v| {
        let (x, b) = (g.input(xc.clone()), g.input(bc.clone()));
        let y = g.linear(x, v, b)?;
        g.softmax_cross_entropy(y, &labels)
    });
    check("linear.b", b, |g, v| {
        let (x, w) = (g.input(xc.clone()), g.input(wc.clone()));
        let y = g.linear(x, w, v)?;
        weighted_sum(g, y, 11)
    });
}

#[test]
fn copy_sampling_and_reductions() {
    check("dropout_copies", normal(&[2, 3, 4], 12), |g, v| {
        let mut rng = stream(12, &[]);
        let y = g.dropout_copies(v, 0.3, 4, &mut rng)?;
        let m = g.mean_axis1(y)?;
        let s = g.square(m)?;
        g.mean(s)
    });
    check("dropout", normal(&[3, 5], 13), |g, v| {
        let mut rng = stream(13, &[]);
        let y = g.dropout(v, 0.5, &mut rng)?;
        weighted_sum(g, y, 13)
    });
    check("combine", normal(&[4], 14), |g, v| {
        let sq = g.square(v)?;
        let z = g.combine(v, 0.7, sq, -1.3)?;
        weighted_sum(g, z, 14)
    });
}

#[test]
fn effective_dimension_gradients() {
    let basis = haar_basis(3, 5, 1).unwrap().matrix;
    for seed in 0..5 {
        let x = normal(&[2, 5, 3, 3], 200 + seed);
        let b = basis.clone();
        check("channel_samples", x.clone(), move |g, v| {
            let rows = g.channel_samples(v, Some(&b))?;
            weighted_sum(g, rows, seed)
        });
        check("grouped_ed", normal(&[12, 4], 300 + seed), |g, v| {
            let groups = vec![(0..6).collect(), (6..12).collect(), vec![0, 3, 5, 7, 11]];
            let ed = g.grouped_effective_dim(v, groups, 1e-12)?;
            weighted_sum(g, ed, seed)
        });
    }
}

/// Input → noisy copies → block → compression objective, differentiated with
/// respect to the block kernels.
#[test]
fn compression_objective_through_a_block() {
    let conv = Conv2dSpec { stride: 1, padding: 2, groups: 1 };
    let pool = PoolSpec { mode: PoolMode::Max, kernel: 4, stride: 2, padding: 1 };
    let (b, n, cout) = (3, 4, 6);
    for seed in 0..20u64 {
        let x = normal(&[b, 1, 8, 8], 1000 + seed).map(|v| v.abs());
        let w = normal(&[cout, 1, 5, 5], 2000 + seed).map(|v| v * 0.3);
        let basis = haar_basis(4, cout, seed).unwrap().matrix;
        let alpha = (seed % 5) as f64 / 4.0;
        let supervision = if seed % 3 == 0 { Supervision::SupSampling } else { Supervision::Unsup };
        let labels = [0usize, 1, 0];
        check("dc.w", w, |g, v| {
            let mut rng = stream(seed, &[7]);
            let xi = g.input(x.clone());
            let copies = g.dropout_copies(xi, 0.2, n, &mut rng)?;
            let folded = g.reshape(copies, &[b * n, 1, 8, 8])?;
            let y = g.conv_block(folded, v, conv, pool)?;
            let [_, c, h, wd] = g.value(y).dims4()?;
            let acts = g.reshape(y, &[b, n, c, h, wd])?;
            let terms = dc_objective(g, acts, Some(&basis), alpha, 1e-12, supervision, Some(&labels))?;
            Ok(terms.loss)
        });
    }
}
