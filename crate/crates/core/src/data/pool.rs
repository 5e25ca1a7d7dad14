use super::folder::{Split, TaskDataset};
use super::Image;
use crate::error::{GrappaError, Result};

/// Training images of every task with class and task identity removed.
///
/// Ids are stable positions after ordering the inputs by task name.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledPool {
    images: Vec<Image>,
}

impl UnlabeledPool {
    pub fn from_images(images: Vec<Image>) -> Self {
        Self { images }
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn ids(&self) -> Vec<usize> {
        (0..self.images.len()).collect()
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

pub fn make_unlabeled_pool(splits: &[&TaskDataset]) -> Result<UnlabeledPool> {
    if let Some(t) = splits.iter().find(|t| t.split != Split::Train) {
        return Err(GrappaError::Data(format!(
            "test split of task `{}` cannot enter the training pool",
            t.task
        )));
    }
    let mut ordered: Vec<&TaskDataset> = splits.to_vec();
    ordered.sort_by(|a, b| a.task.cmp(&b.task));
    Ok(UnlabeledPool {
        images: ordered.iter().flat_map(|t| t.images.iter().cloned()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(name: &str, split: Split, n: usize, shade: f32) -> TaskDataset {
        TaskDataset {
            task: name.into(),
            split,
            class_names: vec!["x".into()],
            images: (0..n)
                .map(|i| Image::new(1, 1, 1, vec![shade + i as f32]).unwrap())
                .collect(),
            labels: vec![0; n],
        }
    }

    #[test]
    fn pools_train_splits_in_task_order() {
        let a = task("a", Split::Train, 10, 0.0);
        let b = task("b", Split::Train, 10, 100.0);
        let p1 = make_unlabeled_pool(&[&a, &b]).unwrap();
        let p2 = make_unlabeled_pool(&[&b, &a]).unwrap();
        assert_eq!(p1.len(), 20);
        assert_eq!(p1, p2);
        assert_eq!(p1.ids(), (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn test_split_rejected() {
        let a = task("a", Split::Test, 2, 0.0);
        assert!(make_unlabeled_pool(&[&a]).is_err());
    }
}
