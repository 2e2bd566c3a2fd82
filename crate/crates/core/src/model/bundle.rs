use crate::error::{Error, Result};
use crate::numeric::{l2_norm_all, Tensor};

/// Named gradients of every parameter of the global model, as produced by a
/// user.
///
/// Besides the gradients, the bundle carries the victim's private
/// bookkeeping of the protection it applied (clip factor and noise scale).
/// That bookkeeping never crosses to the server: [`GradientBundle::upload`]
/// yields an [`ObservedGradients`] that holds gradient values only.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    entries: Vec<(String, Tensor)>,
    clip_factor: Option<f64>,
    noise_sigma: Option<f64>,
}

impl GradientBundle {
    pub fn new(entries: Vec<(String, Tensor)>) -> Result<Self> {
        for (i, (name, _)) in entries.iter().enumerate() {
            if entries[..i].iter().any(|(n, _)| n == name) {
                return Err(Error::Shape(format!("duplicate gradient entry {name:?}")));
            }
        }
        Ok(Self {
            entries,
            clip_factor: None,
            noise_sigma: None,
        })
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        find(&self.entries, name)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Shape(format!("no gradient entry {name:?}")))
    }

    /// Euclidean norm of the whole bundle flattened into one vector.
    pub fn norm(&self) -> f64 {
        l2_norm_all(self.entries.iter().map(|(_, t)| t))
    }

    /// Total number of gradient entries.
    pub fn len(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clip factor `max(1, ||g|| / C)` applied by the victim, if any.
    pub fn clip_factor(&self) -> Option<f64> {
        self.clip_factor
    }

    /// Noise standard deviation applied by the victim, if any.
    pub fn noise_sigma(&self) -> Option<f64> {
        self.noise_sigma
    }

    pub(crate) fn record_clip(&mut self, delta: f64) {
        self.clip_factor = Some(self.clip_factor.unwrap_or(1.0) * delta);
    }

    pub(crate) fn record_noise(&mut self, sigma: f64) {
        self.noise_sigma = Some(sigma);
    }

    /// What the server receives: gradient values only.
    pub fn upload(&self) -> ObservedGradients {
        ObservedGradients {
            entries: self.entries.clone(),
        }
    }

    /// Same layout and shapes as `other`.
    pub fn same_layout(&self, other: &GradientBundle) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape())
    }
}

/// Server-side view of an uploaded bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedGradients {
    entries: Vec<(String, Tensor)>,
}

impl ObservedGradients {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        Self { entries }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        find(&self.entries, name)
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }
}

fn find<'a>(entries: &'a [(String, Tensor)], name: &str) -> Result<&'a Tensor> {
    entries
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Shape(format!("no gradient entry {name:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn norm_and_lookup() {
        let b = GradientBundle::new(vec![
            ("a".into(), Tensor::from_vec(&[1], vec![3.0]).unwrap()),
            ("b".into(), Tensor::from_vec(&[1], vec![4.0]).unwrap()),
        ])
        .unwrap();
        assert_eq!(b.norm(), 5.0);
        assert_eq!(b.get("b").unwrap().data(), &[4.0]);
        assert!(b.get("c").is_err());
        assert_eq!(b.upload().entries(), b.entries());
    }

    #[test]
    fn duplicate_names_rejected() {
        let t = Tensor::zeros(&[1]);
        assert!(GradientBundle::new(vec![("a".into(), t.clone()), ("a".into(), t)]).is_err());
    }
}
