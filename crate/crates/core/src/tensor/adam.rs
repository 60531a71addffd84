use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for every parameter of one store.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            m: params.zero_buffers(),
            v: params.zero_buffers(),
        }
    }

    /// One bias-corrected Adam update. `grads` is indexed like the store.
    /// Nothing is modified when any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>]) -> Result<()> {
        assert_eq!(grads.len(), params.len(), "contract violation: gradient count");
        for (id, name, t) in params.iter() {
            let g = &grads[id.index()];
            assert_eq!(
                g.len(),
                t.numel(),
                "contract violation: gradient for {name} has {} entries, parameter {:?}",
                g.len(),
                t.shape()
            );
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::numeric("adam_step", format!("gradient of {name} contains {bad}")));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.index();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, g), m), v) in params
                .get_mut(id)
                .data_mut()
                .iter_mut()
                .zip(&grads[i])
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(w));
        s
    }

    #[test]
    fn zero_gradient_decays_moments() {
        let mut p = scalar_store(1.25);
        let mut st = AdamState::new(&p, AdamConfig::default());
        st.m[0][0] = 0.5;
        st.v[0][0] = 0.25;
        st.step(&mut p, &[vec![0.0]]).unwrap();
        assert_eq!(st.m[0][0], 0.9 * 0.5);
        assert_eq!(st.v[0][0], 0.999 * 0.25);
    }

    #[test]
    fn zero_gradient_from_rest_is_a_no_op() {
        let mut p = scalar_store(-3.0);
        let mut st = AdamState::new(&p, AdamConfig::default());
        st.step(&mut p, &[vec![0.0]]).unwrap();
        assert_eq!(p.get(p.ids().next().unwrap()).item(), -3.0);
        assert_eq!((st.m[0][0], st.v[0][0]), (0.0, 0.0));
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        for g in [3.7, -0.02, 1e3] {
            let mut p = scalar_store(0.0);
            let mut st = AdamState::new(&p, AdamConfig::default());
            st.step(&mut p, &[vec![g]]).unwrap();
            let w = p.get(p.ids().next().unwrap()).item();
            assert!((w + 1e-3 * g.signum()).abs() < 1e-9, "g={g}: w={w}");
        }
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = scalar_store(0.0);
        let mut st = AdamState::new(&p, AdamConfig::default());
        let err = st.step(&mut p, &[vec![f64::NAN]]).unwrap_err();
        assert!(err.to_string().contains("gradient of w"));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn quadratic_descent() {
        let mut p = scalar_store(0.0);
        let id = p.ids().next().unwrap();
        let mut st = AdamState::new(&p, AdamConfig { lr: 0.1, ..AdamConfig::default() });
        let mut dist = Vec::new();
        for _ in 0..50 {
            let w = p.get(id).item();
            st.step(&mut p, &[vec![2.0 * (w - 2.0)]]).unwrap();
            dist.push((p.get(id).item() - 2.0).abs());
        }
        assert!(dist[49] < 0.5, "final distance {}", dist[49]);
        // monotone approach over the first stretch, before momentum overshoot
        assert!(dist[..10].windows(2).all(|w| w[1] < w[0]));
    }
}
