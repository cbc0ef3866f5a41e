#![allow(dead_code)]

use std::path::PathBuf;

use citeintent::backend::{load_mlm, BagOfContextMlm, Checkpoint, MockMlm};
use citeintent::dataset::{load_dataset, Dataset, LabelSchema, Split};
use citeintent::prompt::MaskedLanguageModel;
use citeintent::verbalizer::Verbalizer;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn mock_mlm() -> Box<dyn MaskedLanguageModel> {
    load_mlm(fixture("mock_mlm.json").to_str().unwrap()).unwrap()
}

pub fn mock_concrete() -> MockMlm {
    let raw = std::fs::read_to_string(fixture("mock_mlm.json")).unwrap();
    match serde_json::from_str::<Checkpoint>(&raw).unwrap() {
        Checkpoint::Mock(c) => MockMlm::new(c).unwrap(),
        Checkpoint::BagOfContext(_) => panic!("fixture is not a mock checkpoint"),
    }
}

pub fn bag_mlm(scale: f64) -> BagOfContextMlm {
    BagOfContextMlm::from_mock(&mock_concrete(), "toy-bag-of-context", scale)
}

pub fn toy_verbalizer() -> Verbalizer {
    Verbalizer::from_words(
        &LabelSchema::scicite(),
        &[
            ("background", &["background", "prior", "context"]),
            ("method", &["method", "technique", "procedure"]),
            ("result", &["result", "finding", "outcome"]),
        ],
    )
    .unwrap()
}

pub fn test_set() -> Dataset {
    load_dataset(fixture("scicite_test.jsonl"), &LabelSchema::scicite(), Split::Test).unwrap()
}

pub fn train_set() -> Dataset {
    load_dataset(fixture("scicite_train.jsonl"), &LabelSchema::scicite(), Split::Train).unwrap()
}
