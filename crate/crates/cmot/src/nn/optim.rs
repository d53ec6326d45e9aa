//! Stochastic gradient descent over named parameter groups.
//!
//! A group is a dotted-name prefix such as `backbone` or
//! `marmot.branch_rgb`. The optimizer only ever touches parameters whose
//! name falls under one of its groups; everything else stays bit-identical.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use super::Param;

#[derive(Debug, Clone, Copy)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sgd {
    /// Learning rate per trainable group prefix.
    lr_by_group: BTreeMap<String, f64>,
    velocity: BTreeMap<String, ArrayD<f64>>,
    cfg: SgdConfig,
}

impl Sgd {
    pub fn new(lr_by_group: BTreeMap<String, f64>, cfg: SgdConfig) -> Self {
        Sgd {
            lr_by_group,
            velocity: BTreeMap::new(),
            cfg,
        }
    }

    pub fn groups(&self) -> impl Iterator<Item = &str> {
        self.lr_by_group.keys().map(|s| s.as_str())
    }

    /// Learning rate for a fully-qualified parameter name, if trainable.
    /// Longest matching group prefix wins.
    pub fn lr_for(&self, name: &str) -> Option<f64> {
        self.lr_by_group
            .iter()
            .filter(|(g, _)| name == g.as_str() || name.starts_with(&format!("{g}.")))
            .max_by_key(|(g, _)| g.len())
            .map(|(_, lr)| *lr)
    }

    /// Apply one update to a single named parameter. Non-trainable names
    /// are left untouched.
    pub fn apply(&mut self, name: &str, p: &mut Param) {
        let Some(lr) = self.lr_for(name) else {
            return;
        };
        let v = self
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
        for ((vi, gi), wi) in v.iter_mut().zip(p.grad.iter()).zip(p.value.iter()) {
            *vi = self.cfg.momentum * *vi + gi + self.cfg.weight_decay * wi;
        }
        for (wi, vi) in p.value.iter_mut().zip(v.iter()) {
            *wi -= lr * vi;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn prefix_matching_selects_longest_group() {
        let mut lrs = BTreeMap::new();
        lrs.insert("head".to_string(), 0.1);
        lrs.insert("head.fc2".to_string(), 0.5);
        let sgd = Sgd::new(lrs, SgdConfig::default());
        assert_eq!(sgd.lr_for("head.fc1.weight"), Some(0.1));
        assert_eq!(sgd.lr_for("head.fc2.weight"), Some(0.5));
        assert_eq!(sgd.lr_for("backbone.conv1.weight"), None);
        // `headx` must not match the `head` group.
        assert_eq!(sgd.lr_for("headx.weight"), None);
    }

    #[test]
    fn untracked_parameters_are_untouched() {
        let mut lrs = BTreeMap::new();
        lrs.insert("a".to_string(), 0.1);
        let mut sgd = Sgd::new(lrs, SgdConfig { momentum: 0.0, weight_decay: 0.0 });

        let mut p = Param::new(array![1.0, 2.0].into_dyn());
        p.grad = array![1.0, 1.0].into_dyn();

        let before = p.value.clone();
        sgd.apply("b.weight", &mut p);
        assert_eq!(p.value, before);

        sgd.apply("a.weight", &mut p);
        assert_eq!(p.value, array![0.9, 1.9].into_dyn());
    }
}
