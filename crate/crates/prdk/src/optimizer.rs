//! First-order optimizers over flat parameter slices: momentum gradient
//! descent for network weights and a diagonal adaptive-moment method for
//! architecture logits.

#[derive(Debug, Clone)]
enum Kind {
    Momentum {
        momentum: f64,
        velocity: Vec<Vec<f64>>,
    },
    Adaptive {
        beta1: f64,
        beta2: f64,
        eps: f64,
        first: Vec<Vec<f64>>,
        second: Vec<Vec<f64>>,
        steps: Vec<u64>,
    },
}

/// Optimizer with per-slot state; register every parameter once, then call
/// [`Optimizer::step`] with its gradient each iteration.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub lr: f64,
    kind: Kind,
}

impl Optimizer {
    /// Gradient descent with momentum (momentum 0 is plain descent).
    pub fn momentum(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            kind: Kind::Momentum {
                momentum,
                velocity: Vec::new(),
            },
        }
    }

    /// Diagonal first/second-moment adaptive method with bias correction.
    pub fn adaptive(lr: f64) -> Self {
        Self {
            lr,
            kind: Kind::Adaptive {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                first: Vec::new(),
                second: Vec::new(),
                steps: Vec::new(),
            },
        }
    }

    /// Reserve state for a parameter of `len` entries; returns its slot.
    pub fn register(&mut self, len: usize) -> usize {
        match &mut self.kind {
            Kind::Momentum { velocity, .. } => {
                velocity.push(vec![0.0; len]);
                velocity.len() - 1
            }
            Kind::Adaptive {
                first,
                second,
                steps,
                ..
            } => {
                first.push(vec![0.0; len]);
                second.push(vec![0.0; len]);
                steps.push(0);
                first.len() - 1
            }
        }
    }

    /// Apply one update. `mask`, when given, freezes entries where it is
    /// false: neither the parameter nor the optimizer state moves there.
    pub fn step(&mut self, slot: usize, param: &mut [f64], grad: &[f64], mask: Option<&[bool]>) {
        debug_assert_eq!(param.len(), grad.len());
        let active = |i: usize| mask.map_or(true, |m| m[i]);
        match &mut self.kind {
            Kind::Momentum { momentum, velocity } => {
                let v = &mut velocity[slot];
                for i in 0..param.len() {
                    if !active(i) {
                        continue;
                    }
                    v[i] = *momentum * v[i] + grad[i];
                    param[i] -= self.lr * v[i];
                }
            }
            Kind::Adaptive {
                beta1,
                beta2,
                eps,
                first,
                second,
                steps,
            } => {
                steps[slot] += 1;
                let t = steps[slot] as f64;
                let (m, v) = (&mut first[slot], &mut second[slot]);
                let bc1 = 1.0 - beta1.powf(t);
                let bc2 = 1.0 - beta2.powf(t);
                for i in 0..param.len() {
                    if !active(i) {
                        continue;
                    }
                    m[i] = *beta1 * m[i] + (1.0 - *beta1) * grad[i];
                    v[i] = *beta2 * v[i] + (1.0 - *beta2) * grad[i] * grad[i];
                    let mh = m[i] / bc1;
                    let vh = v[i] / bc2;
                    param[i] -= self.lr * mh / (vh.sqrt() + *eps);
                }
            }
        }
    }
}
