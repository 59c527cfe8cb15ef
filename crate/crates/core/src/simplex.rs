//! Bounded derivative-free simplex search.
//!
//! Nelder-Mead with the standard reflection/expansion/contraction/shrink
//! coefficients (1, 2, 0.5, 0.5) and box projection: every candidate vertex is
//! clamped into `[lo, hi]` before evaluation, which is adequate for the
//! smooth, low-dimensional objectives used in control design.  Maximization
//! convention.  The search is fully deterministic given the start point; any
//! Monte Carlo noise inside the objective must be frozen by the caller
//! (common random numbers), otherwise the simplex chases sampling noise.
//!
//! Objective values that come back NaN are treated as `-inf` so a failed
//! evaluation can never be selected.

#[derive(Debug, Clone)]
pub struct SimplexOpts {
    pub max_evals: usize,
    /// Stop when the value spread across the simplex falls below this...
    pub f_tol: f64,
    /// ...and the simplex diameter (max norm) below this.
    pub x_tol: f64,
    /// Initial vertex displacement as a fraction of the box width.
    pub init_step: f64,
}

impl Default for SimplexOpts {
    fn default() -> Self {
        Self {
            max_evals: 400,
            f_tol: 1e-4,
            x_tol: 1e-3,
            init_step: 0.08,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimplexResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
}

fn clamp(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lo[i], hi[i]);
    }
}

/// Maximize `f` over the box `[lo, hi]` starting near `x0`.
pub fn maximize(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x0: &[f64],
    lo: &[f64],
    hi: &[f64],
    opts: &SimplexOpts,
) -> SimplexResult {
    let dim = x0.len();
    assert!(dim > 0 && lo.len() == dim && hi.len() == dim);
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| -> f64 {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    };

    // Initial simplex: the start plus one displaced vertex per coordinate.
    let mut verts: Vec<Vec<f64>> = Vec::with_capacity(dim + 1);
    let mut start = x0.to_vec();
    clamp(&mut start, lo, hi);
    verts.push(start.clone());
    for i in 0..dim {
        let mut v = start.clone();
        let step = opts.init_step * (hi[i] - lo[i]).max(1e-12);
        v[i] = if v[i] + step <= hi[i] {
            v[i] + step
        } else {
            v[i] - step
        };
        clamp(&mut v, lo, hi);
        verts.push(v);
    }
    let mut vals: Vec<f64> = verts.iter().map(|v| eval(v, &mut evals)).collect();

    while evals < opts.max_evals {
        // Sort best-first.
        let mut order: Vec<usize> = (0..=dim).collect();
        order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
        let reorder = |vs: &[Vec<f64>], fs: &[f64], order: &[usize]| {
            (
                order.iter().map(|&i| vs[i].clone()).collect::<Vec<_>>(),
                order.iter().map(|&i| fs[i]).collect::<Vec<_>>(),
            )
        };
        let (v2, f2) = reorder(&verts, &vals, &order);
        verts = v2;
        vals = f2;

        let spread = vals[0] - vals[dim];
        let diameter = verts[1..]
            .iter()
            .flat_map(|v| v.iter().zip(&verts[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0f64, f64::max);
        if spread < opts.f_tol && diameter < opts.x_tol {
            break;
        }

        // Centroid of all but the worst vertex.
        let mut centroid = vec![0.0; dim];
        for v in &verts[..dim] {
            for i in 0..dim {
                centroid[i] += v[i] / dim as f64;
            }
        }
        let blend = |a: &[f64], b: &[f64], t: f64| -> Vec<f64> {
            let mut out: Vec<f64> = a
                .iter()
                .zip(b)
                .map(|(ai, bi)| ai + t * (bi - ai))
                .collect();
            clamp(&mut out, lo, hi);
            out
        };

        let worst = verts[dim].clone();
        let reflected = blend(&centroid, &worst, -1.0);
        let fr = eval(&reflected, &mut evals);

        if fr > vals[0] {
            let expanded = blend(&centroid, &worst, -2.0);
            let fe = eval(&expanded, &mut evals);
            if fe > fr {
                verts[dim] = expanded;
                vals[dim] = fe;
            } else {
                verts[dim] = reflected;
                vals[dim] = fr;
            }
        } else if fr > vals[dim - 1] {
            verts[dim] = reflected;
            vals[dim] = fr;
        } else {
            let contracted = if fr > vals[dim] {
                blend(&centroid, &reflected, 0.5)
            } else {
                blend(&centroid, &worst, 0.5)
            };
            let fc = eval(&contracted, &mut evals);
            if fc > vals[dim].max(fr) {
                verts[dim] = contracted;
                vals[dim] = fc;
            } else {
                // Shrink toward the best vertex.
                for k in 1..=dim {
                    verts[k] = blend(&verts[0], &verts[k], 0.5);
                    vals[k] = eval(&verts[k], &mut evals);
                }
            }
        }
    }

    let best = (0..=dim)
        .max_by(|&a, &b| vals[a].total_cmp(&vals[b]))
        .unwrap();
    SimplexResult {
        x: verts[best].clone(),
        value: vals[best],
        evals,
    }
}
