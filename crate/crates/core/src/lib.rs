#![no_std]
extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod domain;
pub mod guidelines;
pub mod protocol;
pub mod quantity;
pub mod rng;
pub mod sim;
pub mod tools;
pub mod vision;
pub mod agent;
pub mod gateway;
pub mod policy;
pub mod bench;
