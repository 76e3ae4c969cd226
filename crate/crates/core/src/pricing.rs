//! Load-driven spot pricing for resource offers.
//!
//! A resource concedes `dec = (start - min) * (1 - load) / rounds` from the
//! requested price each time it bids, never going below its minimum price.
//! An idle machine concedes the most; a saturated one concedes nothing.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::money::{Exact, Money};

/// Which algebraic form of the decrement to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecrementFormula {
    /// `(sp - mp) * (1 - l) / s`: heavily loaded machines concede less.
    #[default]
    LoadScaled,
    /// `(sp - mp) / (s * (1 - l))`, kept for comparison runs. At `l = 1`
    /// this form diverges and the whole band `sp - mp` is returned instead.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PricingConfig {
    pub start_price: Money,
    pub min_price: Money,
    pub anticipated_rounds: u32,
    #[serde(default)]
    pub formula: DecrementFormula,
    /// Propose the minimum price as a non-binding best offer when the
    /// requested price is below it; otherwise decline.
    #[serde(default = "default_true")]
    pub best_offers: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PricingError {
    #[error("minimum price must be positive, got {0}")]
    NonPositiveMinimum(Money),
    #[error("start price {start} is below minimum price {min}")]
    StartBelowMinimum { start: Money, min: Money },
    #[error("anticipated rounds must be at least 1")]
    ZeroRounds,
}

impl PricingConfig {
    pub fn new(start_price: Money, min_price: Money, anticipated_rounds: u32) -> Result<Self, PricingError> {
        let cfg = PricingConfig {
            start_price,
            min_price,
            anticipated_rounds,
            formula: DecrementFormula::default(),
            best_offers: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Shorthand for whole-unit price bands.
    pub fn band(start: i64, min: i64, rounds: u32) -> Result<Self, PricingError> {
        Self::new(Money::from_units(start), Money::from_units(min), rounds)
    }

    pub fn validate(&self) -> Result<(), PricingError> {
        if !self.min_price.is_positive() {
            return Err(PricingError::NonPositiveMinimum(self.min_price));
        }
        if self.start_price < self.min_price {
            return Err(PricingError::StartBelowMinimum {
                start: self.start_price,
                min: self.min_price,
            });
        }
        if self.anticipated_rounds == 0 {
            return Err(PricingError::ZeroRounds);
        }
        Ok(())
    }
}

/// Fraction of the machine allocated at the time a job would run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LoadSnapshot {
    allocated: Ratio<i128>,
}

impl LoadSnapshot {
    pub const IDLE: LoadSnapshot = LoadSnapshot {
        allocated: Ratio::new_raw(0, 1),
    };

    /// Exact load from core counts; clamps to `[0, 1]`.
    pub fn from_cores(occupied: u64, total: u64) -> Self {
        let total = total.max(1);
        let occupied = occupied.min(total);
        LoadSnapshot {
            allocated: Ratio::new(occupied as i128, total as i128),
        }
    }

    /// Load from a decimal fraction, clamped to `[0, 1]` and kept to 1e-9.
    pub fn from_fraction(fraction: f64) -> Self {
        let f = if fraction.is_nan() { 0.0 } else { fraction.clamp(0.0, 1.0) };
        LoadSnapshot {
            allocated: Ratio::new((f * 1e9).round() as i128, 1_000_000_000),
        }
    }

    pub fn exact(self) -> Ratio<i128> {
        self.allocated
    }

    pub fn fraction(self) -> f64 {
        *self.allocated.numer() as f64 / *self.allocated.denom() as f64
    }
}

/// Outcome of pricing one request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OfferDecision {
    /// A conforming bid at or below the requested price.
    Bid(Money),
    /// The requested price is below the floor; a non-binding offer at the floor.
    BestOffer(Money),
    Decline,
}

impl OfferDecision {
    pub fn price(self) -> Option<Money> {
        match self {
            OfferDecision::Bid(p) | OfferDecision::BestOffer(p) => Some(p),
            OfferDecision::Decline => None,
        }
    }
}

/// The amount by which the resource reduces a requested price.
pub fn decrement(config: &PricingConfig, load: LoadSnapshot) -> Exact {
    let band = config.start_price.exact() - config.min_price.exact();
    let rounds = Ratio::from_integer(config.anticipated_rounds.max(1) as i128);
    let free = Ratio::from_integer(1) - load.exact();
    match config.formula {
        DecrementFormula::LoadScaled => band * free / rounds,
        DecrementFormula::Literal => {
            if free == Ratio::from_integer(0) {
                band
            } else {
                band / (rounds * free)
            }
        }
    }
}

/// How far the resource is willing to cut its price; equal to [`decrement`].
pub fn attractiveness(config: &PricingConfig, load: LoadSnapshot) -> Exact {
    decrement(config, load)
}

/// Prices a request at `requested_price` under the given load.
pub fn make_offer(config: &PricingConfig, load: LoadSnapshot, requested_price: Money) -> OfferDecision {
    if requested_price < config.min_price {
        return if config.best_offers {
            OfferDecision::BestOffer(config.min_price)
        } else {
            OfferDecision::Decline
        };
    }
    let target = Money::from_exact(requested_price.exact() - decrement(config, load));
    OfferDecision::Bid(target.max(config.min_price).min(requested_price))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn units(n: i64) -> Money {
        Money::from_units(n)
    }

    #[test]
    fn thunder1_half_loaded() {
        let cfg = PricingConfig::band(70, 40, 3).unwrap();
        // (30 x 0.5) / 3 = 5
        assert_eq!(decrement(&cfg, LoadSnapshot::from_cores(1, 2)), Ratio::from_integer(5));
    }

    #[test]
    fn zero_band_and_saturation_concede_nothing() {
        let flat = PricingConfig::band(40, 40, 3).unwrap();
        for l in [0.0, 0.3, 1.0] {
            assert_eq!(decrement(&flat, LoadSnapshot::from_fraction(l)), Ratio::from_integer(0));
        }
        let cfg = PricingConfig::band(80, 30, 3).unwrap();
        assert_eq!(decrement(&cfg, LoadSnapshot::from_cores(8, 8)), Ratio::from_integer(0));
    }

    #[test]
    fn atlas1_bid() {
        // 70 - (8 x 0.75) / 3 = 68
        let cfg = PricingConfig::band(33, 25, 3).unwrap();
        assert_eq!(make_offer(&cfg, LoadSnapshot::from_cores(1, 4), units(70)), OfferDecision::Bid(units(68)));
    }

    #[test]
    fn curie2_best_offer_below_floor() {
        let cfg = PricingConfig::band(80, 65, 3).unwrap();
        assert_eq!(
            make_offer(&cfg, LoadSnapshot::from_fraction(0.2), units(55)),
            OfferDecision::BestOffer(units(65))
        );
        let strict = PricingConfig {
            best_offers: false,
            ..cfg
        };
        assert_eq!(make_offer(&strict, LoadSnapshot::IDLE, units(55)), OfferDecision::Decline);
    }

    #[test]
    fn request_at_floor_bids_floor() {
        let cfg = PricingConfig::band(80, 30, 3).unwrap();
        assert_eq!(make_offer(&cfg, LoadSnapshot::IDLE, units(30)), OfferDecision::Bid(units(30)));
    }

    #[test]
    fn curie3_idle_attractiveness() {
        let cfg = PricingConfig::band(80, 30, 3).unwrap();
        let a = attractiveness(&cfg, LoadSnapshot::IDLE);
        assert_eq!(a, Ratio::new(50, 3));
        assert_eq!(Money::from_exact(a), Money::from_cents(1667));
        assert_eq!(a, decrement(&cfg, LoadSnapshot::IDLE));
        assert!(attractiveness(&cfg, LoadSnapshot::from_fraction(0.1)) < a);
    }

    #[test]
    fn literal_formula_concedes_more_under_load() {
        let cfg = PricingConfig {
            formula: DecrementFormula::Literal,
            ..PricingConfig::band(70, 40, 3).unwrap()
        };
        assert_eq!(decrement(&cfg, LoadSnapshot::from_cores(1, 2)), Ratio::from_integer(20));
        assert_eq!(decrement(&cfg, LoadSnapshot::IDLE), Ratio::from_integer(10));
        assert_eq!(decrement(&cfg, LoadSnapshot::from_cores(2, 2)), Ratio::from_integer(30));
    }

    #[test]
    fn config_invariants() {
        assert_eq!(PricingConfig::band(20, 30, 3), Err(PricingError::StartBelowMinimum { start: units(20), min: units(30) }));
        assert!(matches!(PricingConfig::band(20, 0, 3), Err(PricingError::NonPositiveMinimum(_))));
        assert_eq!(PricingConfig::band(20, 10, 0), Err(PricingError::ZeroRounds));
    }

    fn arb_config() -> impl Strategy<Value = PricingConfig> {
        (1i64..20_000, 0i64..20_000, 1u32..10).prop_map(|(min, extra, s)| {
            PricingConfig::new(Money::from_cents(min + extra), Money::from_cents(min), s).unwrap()
        })
    }

    proptest! {
        #[test]
        fn bid_stays_within_floor_and_request(cfg in arb_config(), occ in 0u64..=100, req in 1i64..50_000) {
            let requested = Money::from_cents(req);
            match make_offer(&cfg, LoadSnapshot::from_cores(occ, 100), requested) {
                OfferDecision::Bid(p) => {
                    prop_assert!(requested >= cfg.min_price);
                    prop_assert!(p >= cfg.min_price && p <= requested);
                }
                OfferDecision::BestOffer(p) => {
                    prop_assert!(requested < cfg.min_price);
                    prop_assert_eq!(p, cfg.min_price);
                }
                OfferDecision::Decline => prop_assert!(false, "best offers enabled"),
            }
        }

        #[test]
        fn decrement_monotone(cfg in arb_config(), a in 0u64..=100, b in 0u64..=100) {
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(decrement(&cfg, LoadSnapshot::from_cores(lo, 100)) >= decrement(&cfg, LoadSnapshot::from_cores(hi, 100)));
            let more_rounds = PricingConfig { anticipated_rounds: cfg.anticipated_rounds + 1, ..cfg.clone() };
            let l = LoadSnapshot::from_cores(lo, 100);
            prop_assert!(decrement(&more_rounds, l) <= decrement(&cfg, l));
            let band = cfg.start_price.exact() - cfg.min_price.exact();
            let d = decrement(&cfg, l);
            prop_assert!(d >= Ratio::from_integer(0));
            prop_assert!(d <= band / Ratio::from_integer(cfg.anticipated_rounds as i128));
        }

        #[test]
        fn repeated_rounds_converge_to_floor(min in 100i64..10_000, extra in 300i64..10_000, s in 1u32..6, occ in 0u64..95, head in 0i64..20_000) {
            let cfg = PricingConfig::new(Money::from_cents(min + extra), Money::from_cents(min), s).unwrap();
            let load = LoadSnapshot::from_cores(occ, 100);
            let mut request = Money::from_cents(min + head);
            let mut rounds = 0;
            while request > cfg.min_price {
                let OfferDecision::Bid(p) = make_offer(&cfg, load, request) else {
                    return Err(TestCaseError::fail("expected a bid"));
                };
                prop_assert!(p <= request);
                prop_assert!(p < request, "no progress at {}", request);
                request = p;
                rounds += 1;
                prop_assert!(rounds < 10_000);
            }
            prop_assert_eq!(request, cfg.min_price);
        }
    }
}
