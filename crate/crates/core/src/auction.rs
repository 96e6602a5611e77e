//! Single-impression second-price auctions with budget enforcement.
//!
//! The highest positive bid wins and pays the second-highest bid (zero when
//! nobody else bid). Ties break toward the lowest agent index. A zero bid is
//! treated as sitting the auction out, so an agent with a zero coefficient or
//! a zero-value impression can never win. When the provisional winner cannot
//! afford the price, the platform removes it and re-auctions the impression
//! once among the remaining bidders.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AuctionError {
    #[error("auction requires at least one bid")]
    NoBids,
    #[error("bids must be nonnegative, got {0}")]
    NegativeBid(f64),
}

/// Outcome of auctioning one impression.
#[derive(Clone, Debug, PartialEq)]
pub struct AuctionOutcome {
    /// Winning agent, if any bid was positive and affordable.
    pub winner: Option<usize>,
    /// Price charged to the winner: the second-highest bid among participants.
    pub cost: f64,
    /// Win indicator per agent; at most one entry is true.
    pub x: Vec<bool>,
}

impl AuctionOutcome {
    fn no_winner(n: usize) -> Self {
        Self {
            winner: None,
            cost: 0.0,
            x: vec![false; n],
        }
    }
}

/// Runs a generalized second-price auction over one impression.
fn run_among(bids: &[f64], active: &[bool]) -> AuctionOutcome {
    let mut best: Option<usize> = None;
    let mut second = 0.0f64;
    for (i, &b) in bids.iter().enumerate() {
        if !active[i] || b <= 0.0 {
            continue;
        }
        match best {
            Some(w) if b > bids[w] => {
                second = bids[w];
                best = Some(i);
            }
            Some(_) => {
                if b > second {
                    second = b;
                }
            }
            None => best = Some(i),
        }
    }
    match best {
        Some(w) => {
            let mut x = vec![false; bids.len()];
            x[w] = true;
            AuctionOutcome {
                winner: Some(w),
                cost: second,
                x,
            }
        }
        None => AuctionOutcome::no_winner(bids.len()),
    }
}

/// GSP over all agents, ignoring budgets.
pub fn run_gsp_auction(bids: &[f64]) -> Result<AuctionOutcome, AuctionError> {
    if bids.is_empty() {
        return Err(AuctionError::NoBids);
    }
    for &b in bids {
        if b < 0.0 {
            return Err(AuctionError::NegativeBid(b));
        }
    }
    Ok(run_among(bids, &vec![true; bids.len()]))
}

/// Applies the platform's budget control to a provisional outcome.
///
/// If the winner cannot cover the price from its remaining budget, it is
/// removed and the impression is re-auctioned once among the other bidders;
/// if that winner is also over budget the impression goes unsold.
pub fn enforce_budget(
    outcome: AuctionOutcome,
    bids: &[f64],
    remaining_budgets: &[f64],
) -> AuctionOutcome {
    let Some(first) = outcome.winner else {
        return outcome;
    };
    if outcome.cost <= remaining_budgets[first] {
        return outcome;
    }
    let mut active: Vec<bool> = remaining_budgets.iter().map(|&b| b > 0.0).collect();
    active[first] = false;
    let retry = run_among(bids, &active);
    match retry.winner {
        Some(w) if retry.cost <= remaining_budgets[w] => retry,
        _ => AuctionOutcome::no_winner(bids.len()),
    }
}

/// Auction one impression end to end: GSP, then budget control. Agents whose
/// remaining budget is exhausted do not participate.
pub fn auction_impression(
    bids: &[f64],
    remaining_budgets: &[f64],
) -> Result<AuctionOutcome, AuctionError> {
    if bids.is_empty() {
        return Err(AuctionError::NoBids);
    }
    for &b in bids {
        if b < 0.0 {
            return Err(AuctionError::NegativeBid(b));
        }
    }
    let active: Vec<bool> = remaining_budgets.iter().map(|&b| b > 0.0).collect();
    let outcome = run_among(bids, &active);
    Ok(enforce_budget(outcome, bids, remaining_budgets))
}
