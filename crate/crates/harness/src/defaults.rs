//! Toy-scale optimizer defaults.

use dnt_core::optim::{Hyper, OptimizerKind};

/// Peak learning rate, weight decay and warmup per optimizer. The peaks were
/// picked by a sweep on S5 and are shared by every setting. The floor of the
/// cosine schedule is a tenth of the peak, written as a literal so that config
/// files reproduce it exactly, and clipping is at norm 1.
pub fn hyper(kind: OptimizerKind) -> Hyper {
    let mut h = match kind {
        OptimizerKind::Msgdw => {
            let mut h = Hyper::msgdw(0.25, 1e-4);
            h.lr_min = 0.025;
            h
        }
        OptimizerKind::Adamw => {
            let mut h = Hyper::adamw(3e-3, 0.1);
            h.lr_min = 3e-4;
            h.warmup = 100;
            h
        }
    };
    h.clip = Some(1.0);
    h
}
