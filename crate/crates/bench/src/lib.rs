//! Fixtures shared by the criterion benches: a desk-scale dataset and
//! freshly initialized networks.

use hrlf_core::data::generate_synthetic;
use hrlf_core::trainer::{Auxiliary, Batch};
use hrlf_core::{Dataset, ModelConfig, NetworkBundle, Role, SyntheticConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const BATCH: usize = 32;

pub struct Fixture {
    pub dataset: Dataset,
    pub teacher: NetworkBundle,
    pub student: NetworkBundle,
    pub aux: Auxiliary,
    pub batch: Batch,
}

impl Fixture {
    pub fn desk() -> Self {
        let dataset = generate_synthetic(&SyntheticConfig::default()).expect("default synthetic config");
        let shapes = dataset.manifest.shapes();
        let model = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let teacher = NetworkBundle::new(Role::Teacher, dataset.task(), shapes, &model, &mut rng).expect("teacher");
        let student = NetworkBundle::new(Role::Student, dataset.task(), shapes, &model, &mut rng).expect("student");
        let aux = Auxiliary::new(model.encoder.d_model, &mut rng);
        let train = dataset.split("train").expect("train split");
        let batch = Batch::from_samples(&train[..BATCH]).expect("batch");
        Self { dataset, teacher, student, aux, batch }
    }
}
