use qfi_core::fault::{fault_rate, FaultSite};
use qfi_core::{build_ccdf, count_vulnerable_bits};

/// Shape walk over the preset written out by hand: (C, H, W) in, conv
/// (out, k, pad) or linear (in, out).
fn ccdf_walk() -> u64 {
    let mut total = 0u64;
    let conv = |c: u64, h: u64, w: u64, out: u64, k: u64| -> u64 {
        let i8 = c * h * w * 8;
        let w8 = out * c * k * k * 8;
        let b32 = out * 32;
        let o = out * h * w; // stride 1, same padding
        i8 + w8 + b32 + o * 32 + o * 8
    };
    total += conv(1, 28, 28, 16, 3);
    total += conv(16, 14, 14, 32, 3);
    let (fin, fout) = (32 * 7 * 7, 10);
    total += fin * 8 + fin * fout * 8 + fout * 32 + fout * 32 + fout * 8;
    total
}

#[test]
fn ccdf_budget_matches_shape_walk() {
    let model = build_ccdf(0);
    let budget = count_vulnerable_bits(&model, &[1, 28, 28]).unwrap();
    assert_eq!(budget.total(), ccdf_walk());
    assert_eq!(budget.total(), 962_256);
}

#[test]
fn site_populations_partition_the_total() {
    let budget = build_ccdf(0).bit_budget();
    let sum: u64 = FaultSite::ALL.iter().map(|&s| budget.site_total(s)).sum();
    assert_eq!(sum, budget.total());
    for s in FaultSite::ALL {
        assert_eq!(budget.restrict(&[], Some(s)).total(), budget.site_total(s));
    }
    let unprotected = budget.restrict(&[FaultSite::B32, FaultSite::O32], None);
    assert_eq!(
        unprotected.total(),
        budget.total() - budget.site_total(FaultSite::B32) - budget.site_total(FaultSite::O32)
    );
    assert_eq!(unprotected.total(), 357_968);
    assert!((fault_rate(357_968, &unprotected).unwrap() - 1.0).abs() < 1e-15);
}
