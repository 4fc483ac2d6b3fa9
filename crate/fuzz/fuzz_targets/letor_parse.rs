#![no_main]

use libfuzzer_sys::fuzz_target;

// The LETOR parser must return a structured error or a consistent parse on
// any input, never panic. Round-tripping a successful parse must succeed
// and preserve labels, qids, and features.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(parsed) = dlcm::data::parse_letor_str(text) else {
        return;
    };
    for g in &parsed.groups {
        assert!(g.num_docs() >= 1);
        assert_eq!(g.num_features(), parsed.num_features);
        assert!(g.labels.iter().all(|&l| l <= 4));
    }
    let mut buf = Vec::new();
    dlcm::data::write_letor(&mut buf, &parsed.groups).unwrap();
    let again = dlcm::data::parse_letor_str(std::str::from_utf8(&buf).unwrap()).unwrap();
    assert_eq!(parsed.groups.len(), again.groups.len());
    for (a, b) in parsed.groups.iter().zip(&again.groups) {
        assert_eq!(a.query_id, b.query_id);
        assert_eq!(a.labels, b.labels);
        // Feature widths may differ when the widest column of the original
        // file is all-zero; values must still agree where defined.
        for d in 0..a.num_docs() {
            for (x, y) in a.feature_row(d).iter().zip(b.feature_row(d)) {
                assert!(x == y || (x.is_nan() && y.is_nan()));
            }
        }
    }
});
