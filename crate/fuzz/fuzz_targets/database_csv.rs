#![no_main]

use libfuzzer_sys::fuzz_target;
use pipret::field::{compute_table, Database};

fuzz_target!(|data: &[u8]| {
    if let Ok(db) = Database::from_csv(data) {
        // anything accepted must round-trip and be safe to tabulate
        let again = Database::from_csv_str(&db.to_csv_string()).expect("own output parses");
        assert_eq!(again, db);
        if db.files() * db.length() <= 1 << 12 {
            let table = compute_table(&db);
            assert!(table.values().iter().all(|&v| v < db.modulus().get()));
        }
    }
});
