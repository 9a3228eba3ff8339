#include <catch2/catch_amalgamated.hpp>

#include "advpose/skeleton.hpp"

using namespace advpose;

namespace {

Pose3D random_world_pose(Rng& rng, int P = 16) {
  Pose3D p{Mat(P, 3), Frame::World};
  for (int j = 0; j < P; j++) {
    p.coords(j, 0) = rng.uniform(-800.0, 800.0);
    p.coords(j, 1) = rng.uniform(-800.0, 800.0);
    p.coords(j, 2) = rng.uniform(500.0, 5000.0);
  }
  return p;
}

}  // namespace

TEST_CASE("identity camera puts the optical axis at the principal point") {
  CameraModel cam;
  cam.fx = cam.fy = 1000.0;
  cam.cx = cam.cy = 0.0;

  Pose3D pose{Mat(2, 3), Frame::World};
  pose.coords.row(0) << 0.0, 0.0, 1000.0;
  pose.coords.row(1) << 100.0, 0.0, 1000.0;

  auto [cam_pose, px] = project(pose, cam);
  REQUIRE(cam_pose.frame == Frame::Camera);
  REQUIRE(cam_pose.coords.row(0).isApprox(pose.coords.row(0)));
  REQUIRE(px.coords(0, 0) == 0.0);
  REQUIRE(px.coords(0, 1) == 0.0);
  REQUIRE(px.coords(1, 0) == 100.0);  // 1000 * 100 / 1000
  REQUIRE(px.coords(1, 1) == 0.0);
}

TEST_CASE("rotation about Y matches direct matrix arithmetic") {
  // Hand-written rotation matrices for +-90 degrees about Y; the oracle below
  // multiplies them out entry by entry, independent of the projection code.
  Mat3 r_pos, r_neg;
  r_pos << 0, 0, 1, 0, 1, 0, -1, 0, 0;   // +90 deg
  r_neg << 0, 0, -1, 0, 1, 0, 1, 0, 0;   // -90 deg

  Pose3D pose{Mat(1, 3), Frame::World};
  pose.coords.row(0) << 1000.0, 0.0, 0.0;

  CameraModel cam;
  cam.fx = cam.fy = 1000.0;
  cam.cx = cam.cy = 0.0;

  cam.rotation = r_pos;
  REQUIRE(cam.rotation_valid());
  // r_pos * (1000,0,0) = (0,0,-1000): behind the camera.
  REQUIRE_THROWS_AS(project(pose, cam), NonPositiveDepth);

  cam.rotation = r_neg;
  REQUIRE(cam.rotation_valid());
  auto [cam_pose, px] = project(pose, cam);
  Vec3 oracle;
  for (int i = 0; i < 3; i++) {
    oracle(i) = 0.0;
    for (int k = 0; k < 3; k++) oracle(i) += r_neg(i, k) * pose.coords(0, k);
  }
  REQUIRE(oracle.z() == 1000.0);
  REQUIRE((cam_pose.coords.row(0).transpose() - oracle).norm() == 0.0);
  REQUIRE(px.coords(0, 0) == Catch::Approx(0.0).margin(1e-12));
  REQUIRE(px.coords(0, 1) == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("translation uses the R*(p - t) convention") {
  CameraModel cam;
  cam.fx = 500.0;
  cam.fy = 600.0;
  cam.cx = 10.0;
  cam.cy = 20.0;
  cam.translation = Vec3(100.0, -50.0, -2000.0);

  Pose3D pose{Mat(1, 3), Frame::World};
  pose.coords.row(0) << 150.0, 30.0, 0.0;

  auto [cam_pose, px] = project(pose, cam);
  REQUIRE(cam_pose.coords(0, 0) == 50.0);
  REQUIRE(cam_pose.coords(0, 1) == 80.0);
  REQUIRE(cam_pose.coords(0, 2) == 2000.0);
  REQUIRE(px.coords(0, 0) == Catch::Approx(500.0 * 50.0 / 2000.0 + 10.0));
  REQUIRE(px.coords(0, 1) == Catch::Approx(600.0 * 80.0 / 2000.0 + 20.0));
}

TEST_CASE("project rejects joints behind the camera and camera-frame input") {
  CameraModel cam;
  Pose3D pose{Mat(1, 3), Frame::World};
  pose.coords.row(0) << 0.0, 0.0, -1.0;
  REQUIRE_THROWS_AS(project(pose, cam), NonPositiveDepth);

  pose.coords.row(0) << 0.0, 0.0, 1.0;
  pose.frame = Frame::Camera;
  REQUIRE_THROWS_AS(project(pose, cam), Error);
}

TEST_CASE("back-projection with known depths recovers camera coordinates") {
  Rng rng(11);
  for (int trial = 0; trial < 50; trial++) {
    CameraModel cam;
    cam.fx = rng.uniform(100.0, 2000.0);
    cam.fy = rng.uniform(100.0, 2000.0);
    cam.cx = rng.uniform(-50.0, 50.0);
    cam.cy = rng.uniform(-50.0, 50.0);
    Pose3D pose = random_world_pose(rng);
    auto [cam_pose, px] = project(pose, cam);
    for (int j = 0; j < pose.joints(); j++) {
      double z = cam_pose.coords(j, 2);
      double x = (px.coords(j, 0) - cam.cx) * z / cam.fx;
      double y = (px.coords(j, 1) - cam.cy) * z / cam.fy;
      REQUIRE(std::abs(x - cam_pose.coords(j, 0)) <= 1e-10 * std::max(1.0, std::abs(x)));
      REQUIRE(std::abs(y - cam_pose.coords(j, 1)) <= 1e-10 * std::max(1.0, std::abs(y)));
    }
  }
}

TEST_CASE("projection is scale-consistent along rays") {
  Rng rng(12);
  CameraModel cam;
  cam.fx = 800.0;
  cam.fy = 700.0;
  cam.cx = 16.0;
  cam.cy = 16.0;
  for (int trial = 0; trial < 100; trial++) {
    Pose3D pose{Mat(1, 3), Frame::Camera};
    pose.coords.row(0) << rng.uniform(-500.0, 500.0), rng.uniform(-500.0, 500.0),
        rng.uniform(200.0, 4000.0);
    Pose3D doubled = pose;
    doubled.coords *= 2.0;
    Pose2D a = project_camera_frame(pose, cam);
    Pose2D b = project_camera_frame(doubled, cam);
    REQUIRE((a.coords - b.coords).cwiseAbs().maxCoeff() <= 1e-10);
  }
}

TEST_CASE("default topology is valid") {
  const SkeletonTopology& t = default_topology();
  REQUIRE(t.joint_count == 16);
  REQUIRE(validate_topology(t).empty());
  REQUIRE(t.parent[t.root] == t.root);
  REQUIRE(t.symmetry_pairs.size() == 6);
  REQUIRE(t.limb_groups.size() == 4);
  REQUIRE(t.find("pelvis") == 0);
  REQUIRE(t.find("no_such_joint") == -1);
}

TEST_CASE("validate_topology reports a parent cycle") {
  SkeletonTopology t = default_topology();
  t.parent[3] = 5;
  t.parent[5] = 3;  // 2-cycle detached from the root
  auto bad = validate_topology(t);
  bool found = false;
  for (const auto& msg : bad) found |= msg.find("not a tree") != std::string::npos;
  REQUIRE(found);
}

TEST_CASE("validate_topology reports a degenerate symmetry pair") {
  SkeletonTopology t = default_topology();
  t.symmetry_pairs[0] = {3, 3};
  auto bad = validate_topology(t);
  bool found = false;
  for (const auto& msg : bad) found |= msg.find("left equals right") != std::string::npos;
  REQUIRE(found);
}

TEST_CASE("validate_topology reports multiple roots and bad indices") {
  SkeletonTopology t = default_topology();
  t.parent[4] = 4;
  REQUIRE(!validate_topology(t).empty());

  t = default_topology();
  t.parent[2] = 99;
  REQUIRE(!validate_topology(t).empty());

  t = default_topology();
  t.head_segment = {2, 2};
  REQUIRE(!validate_topology(t).empty());
}

TEST_CASE("subtree enumerates descendants") {
  const SkeletonTopology& t = default_topology();
  auto arm = t.subtree(10);  // left shoulder
  REQUIRE(arm == std::vector<int>{10, 11, 12});
  auto all = t.subtree(t.root);
  REQUIRE(static_cast<int>(all.size()) == t.joint_count);
}

TEST_CASE("topology text round-trip") {
  const SkeletonTopology& t = default_topology();
  std::string text = topology_to_text(t);
  SkeletonTopology back = topology_from_text(text);
  REQUIRE(back.joint_count == t.joint_count);
  REQUIRE(back.parent == t.parent);
  REQUIRE(back.names == t.names);
  REQUIRE(back.symmetry_pairs == t.symmetry_pairs);
  REQUIRE(back.limb_groups == t.limb_groups);
  REQUIRE(back.head_segment == t.head_segment);
  REQUIRE(back.root == t.root);

  REQUIRE_THROWS_AS(topology_from_text("junk"), BadMagic);
  REQUIRE_THROWS_AS(topology_from_text("ADVPOSE-SKEL v1\nwhatkw 1\n"), IoError);
}

TEST_CASE("rotation validity tolerance") {
  CameraModel cam;
  REQUIRE(cam.rotation_valid());
  cam.rotation(0, 0) = 1.0 + 1e-6;
  REQUIRE(!cam.rotation_valid());
  // Reflections (det = -1) are not valid rotations.
  cam.rotation = Mat3::Identity();
  cam.rotation(2, 2) = -1.0;
  REQUIRE(!cam.rotation_valid());
}
