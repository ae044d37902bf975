#![no_main]

use geopretrain_core::dataset::{annotation_class_stats, AnnotationSet};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(set) = AnnotationSet::from_json(text) {
        assert_eq!(set.class_names().len(), set.num_classes());
        if let Ok(stats) = annotation_class_stats(&set.records, set.num_classes()) {
            assert_eq!(stats.counts.iter().sum::<u64>(), stats.total);
        }
    }
});
