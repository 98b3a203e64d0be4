use crate::error::{Error, Result};

/// A point in the shared text/audio embedding space.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    values: Vec<f32>,
}

impl Embedding {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("embedding must be non-empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "embedding values must be finite".into(),
            ));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|&v| (v as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "embedding dims {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument(
            "cosine similarity of a zero vector".into(),
        ));
    }
    let dot: f64 = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(v: &[f32]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    #[test]
    fn cosine_reference_values() {
        let v = e(&[0.3, -1.2, 2.0]);
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        let neg = e(&[-0.3, 1.2, -2.0]);
        assert!((cosine_similarity(&v, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(
            cosine_similarity(&e(&[1.0, 0.0]), &e(&[0.0, 1.0])).unwrap(),
            0.0
        );
        assert!(cosine_similarity(&e(&[0.0, 0.0]), &e(&[1.0, 0.0])).is_err());
        assert!(cosine_similarity(&e(&[1.0]), &e(&[1.0, 0.0])).is_err());
    }

    proptest::proptest! {
        #[test]
        fn cosine_symmetric_and_bounded(a in proptest::collection::vec(-5f32..5.0, 6), b in proptest::collection::vec(-5f32..5.0, 6)) {
            let (a, b) = (e(&a), e(&b));
            if a.norm() > 1e-3 && b.norm() > 1e-3 {
                let ab = cosine_similarity(&a, &b).unwrap();
                proptest::prop_assert_eq!(ab, cosine_similarity(&b, &a).unwrap());
                proptest::prop_assert!((-1.0..=1.0).contains(&ab));
            }
        }
    }
}
