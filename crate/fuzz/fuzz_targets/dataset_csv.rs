#![no_main]

use libfuzzer_sys::fuzz_target;
use pipret::gram_ml::Dataset;

fuzz_target!(|data: &[u8]| {
    for label in [None, Some("label")] {
        if let Ok(ds) = Dataset::from_csv(data, label) {
            assert!(!ds.points.is_empty());
            assert!(ds.points.iter().all(|p| p.len() == ds.feature_names.len()));
            if let Some(labels) = &ds.labels {
                assert_eq!(labels.len(), ds.points.len());
            }
            assert!(ds.max_abs().is_finite());
        }
    }
});
