//! Oracles shared by the integration targets.

#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use condflow::cylindrical::TestFunction;

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

/// Solution of `u_t + b(x) u_x + ½ s² u_xx + f(x) = 0`, `u(T) = g`, on a
/// uniform grid over `[-half_width, half_width]`, by Crank–Nicolson with
/// `u_xx = 0` and one-sided `u_x` at the ends.
pub struct BackwardPde {
    pub xs: Vec<f64>,
    pub h: f64,
    pub dt: f64,
    /// `levels[j]` is `u` at time `T − j·dt`.
    pub levels: Vec<Vec<f64>>,
    pub horizon: f64,
}

impl BackwardPde {
    pub fn solve(
        b: &dyn Fn(f64) -> f64,
        s2: f64,
        f: &dyn Fn(f64) -> f64,
        g: &dyn Fn(f64) -> f64,
        half_width: f64,
        nx: usize,
        nt: usize,
        horizon: f64,
    ) -> Self {
        let h = 2.0 * half_width / nx as f64;
        let dt = horizon / nt as f64;
        let xs: Vec<f64> = (0..=nx).map(|i| -half_width + i as f64 * h).collect();
        let n = xs.len();
        // A u = lo u_{i-1} + di u_i + up u_{i+1}
        let (mut lo, mut di, mut up) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for i in 1..n - 1 {
            let bi = b(xs[i]);
            lo[i] = 0.5 * s2 / (h * h) - bi / (2.0 * h);
            di[i] = -s2 / (h * h);
            up[i] = 0.5 * s2 / (h * h) + bi / (2.0 * h);
        }
        di[0] = -b(xs[0]) / h;
        up[0] = b(xs[0]) / h;
        lo[n - 1] = -b(xs[n - 1]) / h;
        di[n - 1] = b(xs[n - 1]) / h;
        let fv: Vec<f64> = xs.iter().map(|x| f(*x)).collect();
        let mut u: Vec<f64> = xs.iter().map(|x| g(*x)).collect();
        let mut levels = vec![u.clone()];
        for _ in 0..nt {
            let mut rhs = vec![0.0; n];
            for i in 0..n {
                let mut au = di[i] * u[i];
                if i > 0 {
                    au += lo[i] * u[i - 1];
                }
                if i + 1 < n {
                    au += up[i] * u[i + 1];
                }
                rhs[i] = u[i] + 0.5 * dt * au + dt * fv[i];
            }
            let a: Vec<f64> = lo.iter().map(|v| -0.5 * dt * v).collect();
            let d: Vec<f64> = di.iter().map(|v| 1.0 - 0.5 * dt * v).collect();
            let c: Vec<f64> = up.iter().map(|v| -0.5 * dt * v).collect();
            u = thomas(&a, &d, &c, &rhs);
            levels.push(u.clone());
        }
        Self {
            xs,
            h,
            dt,
            levels,
            horizon,
        }
    }

    fn level_index(&self, t: f64) -> usize {
        let j = ((self.horizon - t) / self.dt).round();
        assert!(
            ((self.horizon - t) / self.dt - j).abs() < 1e-6,
            "t must lie on the time grid"
        );
        j as usize
    }

    fn interp(&self, v: &[f64], x: f64) -> f64 {
        let s = ((x - self.xs[0]) / self.h).clamp(0.0, (self.xs.len() - 1) as f64 - 1e-12);
        let i = s.floor() as usize;
        let w = s - i as f64;
        (1.0 - w) * v[i] + w * v[i + 1]
    }

    fn derivatives(&self, u: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = u.len();
        let mut ux = vec![0.0; n];
        let mut uxx = vec![0.0; n];
        for i in 1..n - 1 {
            ux[i] = (u[i + 1] - u[i - 1]) / (2.0 * self.h);
            uxx[i] = (u[i + 1] - 2.0 * u[i] + u[i - 1]) / (self.h * self.h);
        }
        ux[0] = (u[1] - u[0]) / self.h;
        ux[n - 1] = (u[n - 1] - u[n - 2]) / self.h;
        (ux, uxx)
    }

    /// `u(t, ·)` with nodal finite-difference derivatives, linearly interpolated.
    pub fn at(self: &Arc<Self>, t: f64) -> TestFunction {
        let u = Arc::new(self.levels[self.level_index(t)].clone());
        let (ux, uxx) = self.derivatives(&u);
        let (ux, uxx) = (Arc::new(ux), Arc::new(uxx));
        let (p0, p1, p2) = (self.clone(), self.clone(), self.clone());
        let sup = |v: &[f64]| v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        let bounds = (sup(&u), sup(&ux), sup(&uxx));
        TestFunction::Custom {
            dim: 1,
            g: Arc::new(move |x| p0.interp(&u, x[0])),
            grad: Some(Arc::new(move |x, out| out[0] = p1.interp(&ux, x[0]))),
            hess: Some(Arc::new(move |x, out| out[0] = p2.interp(&uxx, x[0]))),
            bounds,
        }
    }

    /// Central time difference of the stored levels at `t`.
    pub fn du_dt(&self, t: f64, x: f64) -> f64 {
        let j = self.level_index(t);
        assert!(j >= 1 && j + 1 < self.levels.len(), "t must be interior");
        // levels run backwards in time
        (self.interp(&self.levels[j - 1], x) - self.interp(&self.levels[j + 1], x))
            / (2.0 * self.dt)
    }
}

fn thomas(a: &[f64], d: &[f64], c: &[f64], r: &[f64]) -> Vec<f64> {
    let n = d.len();
    let mut cp = vec![0.0; n];
    let mut rp = vec![0.0; n];
    cp[0] = c[0] / d[0];
    rp[0] = r[0] / d[0];
    for i in 1..n {
        let m = d[i] - a[i] * cp[i - 1];
        cp[i] = c[i] / m;
        rp[i] = (r[i] - a[i] * rp[i - 1]) / m;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = rp[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = rp[i] - cp[i] * x[i + 1];
    }
    x
}

/// Byte contents of every `.csv` in `dir`, sorted by name.
pub fn csv_files(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}
