#![no_main]

use libfuzzer_sys::fuzz_target;
use periodic_homog::expr::parse_expression;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    for dim in 1..=3 {
        if let Ok(e) = parse_expression(text, dim) {
            // printing and reparsing must give the same tree
            let printed = e.root().to_string();
            let again = parse_expression(&printed, dim).expect("printed form reparses");
            assert!(e.same_shape(&again), "{text:?} -> {printed:?}");
            let _ = e.evaluate(&[0.25, 0.5, 0.75][..dim]);
        }
    }
});
