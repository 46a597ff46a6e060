pub mod checks;
pub mod constraints;
pub mod error;
pub mod filter;
pub mod kinematics;
pub mod qp;
pub mod scenario;
pub mod sim;
pub mod trace;
pub mod visibility;
pub mod world;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/kinematics.md")]
    mod kinematics {}
    #[doc = include_str!("../../../book/src/visibility.md")]
    mod visibility {}
    #[doc = include_str!("../../../book/src/auxiliary.md")]
    mod auxiliary {}
    #[doc = include_str!("../../../book/src/filter.md")]
    mod filter {}
    #[doc = include_str!("../../../book/src/events.md")]
    mod events {}
    #[doc = include_str!("../../../book/src/scenarios.md")]
    mod scenarios {}
    #[doc = include_str!("../../../book/src/teleop.md")]
    mod teleop {}
    #[doc = include_str!("../../../book/src/checks.md")]
    mod checks {}
}
