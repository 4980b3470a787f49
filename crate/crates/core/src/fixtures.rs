//! Small reference instances used by tests, the CLI, and the acceptance suite.

use crate::mdp::{MdpFile, MuEntry, StateEntry, StepMdp, TransitionEntry};

fn state(id: &str, reward: Option<f64>) -> StateEntry {
    StateEntry {
        id: id.into(),
        terminal: reward.is_some(),
        reward,
    }
}

fn edge(from: &str, action: &str, to: &str) -> TransitionEntry {
    TransitionEntry {
        from: from.into(),
        action: action.into(),
        to: to.into(),
    }
}

/// Depth-2 binary tree "T2".
///
/// ```text
/// root --left--> s1 --a_win--> win (1)
///                   --a_lose-> lose (0)
///      --right-> s2 --a0-----> z0 (0)
///                   --a1-----> z1 (0)
/// ```
/// μ puts all mass on `root`; horizon bound 2.
pub fn t2_file() -> MdpFile {
    MdpFile {
        states: vec![
            state("root", None),
            state("s1", None),
            state("s2", None),
            state("win", Some(1.0)),
            state("lose", Some(0.0)),
            state("z0", Some(0.0)),
            state("z1", Some(0.0)),
        ],
        transitions: vec![
            edge("root", "left", "s1"),
            edge("root", "right", "s2"),
            edge("s1", "a_win", "win"),
            edge("s1", "a_lose", "lose"),
            edge("s2", "a0", "z0"),
            edge("s2", "a1", "z1"),
        ],
        mu: vec![MuEntry { state: "root".into(), prob: 1.0 }],
        horizon_bound: 2,
    }
}

pub fn t2() -> StepMdp {
    StepMdp::from_file(&t2_file()).expect("T2 is valid")
}

/// Single path `c0 -> c1 -> ... -> end` with one action per state.
pub fn chain(len: usize, reward: bool) -> StepMdp {
    let mut states: Vec<StateEntry> = (0..len).map(|i| state(&format!("c{i}"), None)).collect();
    states.push(state("end", Some(if reward { 1.0 } else { 0.0 })));
    let transitions = (0..len)
        .map(|i| {
            let to = if i + 1 == len { "end".to_string() } else { format!("c{}", i + 1) };
            edge(&format!("c{i}"), "go", &to)
        })
        .collect();
    StepMdp::from_file(&MdpFile {
        states,
        transitions,
        mu: vec![MuEntry { state: "c0".into(), prob: 1.0 }],
        horizon_bound: len.max(1),
    })
    .expect("chain is valid")
}
