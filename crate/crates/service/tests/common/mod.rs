#![allow(dead_code)]

use std::net::SocketAddr;
use std::sync::Arc;

use dmiso_core::fixtures::{front_camera, random_scene};
use dmiso_core::render::Camera;
use dmiso_core::soup::Vec3;
use dmiso_service::scene_file::SceneFile;
use dmiso_service::server::{spawn, AppState};

pub fn cameras(size: usize) -> Vec<Camera> {
    vec![
        front_camera(size, size, 4.0),
        Camera::look_at(Vec3::new(3.0, -1.0, -2.5), Vec3::zeros(), Vec3::new(0.0, -1.0, 0.0), size, size, 1.0),
    ]
}

pub fn scene_file(seed: u64, cores: usize, k: usize) -> SceneFile {
    let (scene, params) = random_scene(seed, cores, k, 1);
    let mut file = SceneFile::new(scene, params);
    file.cameras = cameras(32);
    file
}

pub async fn start(file: SceneFile) -> (String, Arc<AppState>) {
    let (addr, app, _) = spawn(file, SocketAddr::from(([127, 0, 0, 1], 0)), 2).await.expect("bind");
    (format!("http://{addr}"), app)
}
