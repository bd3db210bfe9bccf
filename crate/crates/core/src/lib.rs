pub mod bench;
pub mod freespace;
pub mod geometry;
pub mod lip;
pub mod mapgen;
pub mod mpc;
pub mod render;
pub mod rrt;
pub mod scenario;
pub mod sim;
