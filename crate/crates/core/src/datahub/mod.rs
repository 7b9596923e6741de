//! Datasets, label-skew partitions, and augmentation.

mod augment;
mod cifar;
mod dataset;
mod partition;

pub use augment::{apply_augmentation, augment, draw_augmentation, AugmentChoice, AUGMENT_PAD};
pub use cifar::{load_cifar10_binary, load_cifar10_file, load_cifar10_test, CIFAR10_RECORD_LEN};
pub use dataset::{generate_synthetic, generate_synthetic_split, Dataset, SYNTHETIC_NOISE_STD};
pub use partition::{load_partition, partition_label_skew, save_partition, Partition, PARTITION_FORMAT_VERSION};
