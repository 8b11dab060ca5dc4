//! Adam with bias correction over named parameter groups sharing one step counter.

#[derive(Clone, Debug, PartialEq)]
pub struct AdamGroup {
    pub lr: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamGroup {
    pub fn new(len: usize, lr: f64) -> Self {
        AdamGroup {
            lr,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub groups: Vec<AdamGroup>,
}

impl AdamState {
    pub fn new(groups: Vec<AdamGroup>) -> Self {
        AdamState {
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            groups,
        }
    }

    /// One update of every group; `params[g]` and `grads[g]` match `groups[g]`.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), self.groups.len());
        assert_eq!(grads.len(), self.groups.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((group, p), g) in self.groups.iter_mut().zip(params.iter_mut()).zip(grads) {
            assert_eq!(p.len(), group.m.len());
            assert_eq!(g.len(), group.m.len());
            for i in 0..p.len() {
                group.m[i] = self.beta1 * group.m[i] + (1.0 - self.beta1) * g[i];
                group.v[i] = self.beta2 * group.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = group.m[i] / bc1;
                let v_hat = group.v[i] / bc2;
                p[i] -= group.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(state: &mut AdamState, params: &mut [&mut [f64]], grads: &[&[f64]]) {
    state.step(params, grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = AdamState::new(vec![AdamGroup::new(3, 0.001)]);
        let mut p = vec![1.0, -2.0, 0.5];
        adam_step(&mut s, &mut [&mut p], &[&[0.0; 3]]);
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_is_lr_sized() {
        let mut s = AdamState::new(vec![AdamGroup::new(1, 0.001)]);
        let mut p = vec![0.0];
        adam_step(&mut s, &mut [&mut p], &[&[1.0]]);
        assert!((p[0] + 0.001 / (1.0 + 1e-8)).abs() < 1e-15);
        assert!((p[0] + 0.000_999_999_99).abs() < 1e-12);
    }

    #[test]
    fn two_steps_match_unrolled_recurrence() {
        let mut s = AdamState::new(vec![AdamGroup::new(1, 0.001), AdamGroup::new(1, 0.0001)]);
        let mut a = vec![0.0];
        let mut b = vec![0.0];
        for _ in 0..2 {
            adam_step(&mut s, &mut [&mut a, &mut b], &[&[1.0], &[1.0]]);
        }
        // by hand: m1 = .1, v1 = .001; m2 = .19, v2 = .001999
        let bc1 = [1.0 - 0.9, 1.0 - 0.81];
        let bc2: [f64; 2] = [1.0 - 0.999, 1.0 - 0.998001];
        let ms = [0.1, 0.19];
        let vs = [0.001, 0.001999];
        let mut expect_a = 0.0;
        let mut expect_b = 0.0;
        for k in 0..2 {
            let u = (ms[k] / bc1[k]) / ((vs[k] / bc2[k]).sqrt() + 1e-8);
            expect_a -= 0.001 * u;
            expect_b -= 0.0001 * u;
        }
        assert!((a[0] - expect_a).abs() < 1e-12);
        assert!((b[0] - expect_b).abs() < 1e-12);
        assert!(s.groups.iter().all(|g| g.v.iter().all(|&v| v >= 0.0)));
    }
}
