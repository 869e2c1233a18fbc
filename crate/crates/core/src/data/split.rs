use rand::seq::SliceRandom;
use rand::Rng;

use super::types::Dataset;
use crate::error::{Error, Result};

/// Per-class stratified split. Each class contributes
/// `round(n_c · fraction)` samples to the train side, clamped so both sides
/// get at least one. Sample order within each side follows the original
/// dataset order.
pub fn split(dataset: &Dataset, train_fraction: f64, rng: &mut impl Rng) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Argument(format!(
            "train fraction {train_fraction} must lie in (0, 1)"
        )));
    }
    let mut by_class = vec![Vec::new(); dataset.num_classes];
    for (i, s) in dataset.samples.iter().enumerate() {
        by_class
            .get_mut(s.label.0)
            .ok_or_else(|| Error::Argument(format!("sample {} has label out of range", s.id)))?
            .push(i);
    }
    let mut is_train = vec![false; dataset.len()];
    for (c, idx) in by_class.iter_mut().enumerate() {
        if idx.len() < 2 {
            return Err(Error::Argument(format!(
                "class {c} has {} samples; at least 2 are needed to split",
                idx.len()
            )));
        }
        idx.shuffle(rng);
        let n_train = ((idx.len() as f64 * train_fraction).round() as usize).clamp(1, idx.len() - 1);
        for &i in &idx[..n_train] {
            is_train[i] = true;
        }
    }
    let (train, test): (Vec<usize>, Vec<usize>) = (0..dataset.len()).partition(|&i| is_train[i]);
    Ok((dataset.subset(&train), dataset.subset(&test)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::types::{AnnotatedSample, Label, RegionInput};
    use crate::geometry::BBox;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dataset(per_class: &[usize]) -> Dataset {
        let mut samples = Vec::new();
        for (c, &n) in per_class.iter().enumerate() {
            for _ in 0..n {
                samples.push(AnnotatedSample {
                    id: samples.len(),
                    image: Tensor::zeros(vec![3, 2, 2]),
                    label: Label(c),
                    object_box: BBox::new(1.0, 1.0, 2.0, 2.0).unwrap(),
                    regions: vec![RegionInput::absent(0)],
                });
            }
        }
        Dataset {
            num_classes: per_class.len(),
            region_names: vec!["r".into()],
            image_size: 2,
            samples,
        }
    }

    #[test]
    fn balanced_half_split() {
        let d = dataset(&[50; 4]);
        let (tr, te) = split(&d, 0.5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!((tr.len(), te.len()), (100, 100));
        for c in 0..4 {
            assert_eq!(tr.samples.iter().filter(|s| s.label.0 == c).count(), 25);
        }
        let mut ids: Vec<usize> = tr.samples.iter().chain(&te.samples).map(|s| s.id).collect();
        ids.sort();
        assert_eq!(ids, (0..200).collect::<Vec<_>>());
        let (tr2, _) = split(&d, 0.5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(tr, tr2);
    }

    #[test]
    fn rejects_tiny_classes_and_bad_fractions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(split(&dataset(&[3, 1]), 0.5, &mut rng).is_err());
        assert!(split(&dataset(&[3, 3]), 1.0, &mut rng).is_err());
        assert!(split(&dataset(&[3, 3]), 0.0, &mut rng).is_err());
    }
}
