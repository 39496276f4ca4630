#include <doctest.h>

#include "stage/errors.h"
#include "stage/json.h"
#include "stage/scene.h"
#include "stage/state.h"

using namespace stage;

TEST_CASE("builtin scenes validate") {
  for (const char* name : {"spheres_ramp", "spheres_cube"}) {
    SceneSpec s = builtin_scene(name);
    CHECK_NOTHROW(s.validate());
    CHECK(s.name == name);
    CHECK(is_builtin_scene(name));
  }
  CHECK_THROWS_AS(builtin_scene("nope"), ValidationError);
  CHECK(!is_builtin_scene("nope"));
}

TEST_CASE("scene json round trip") {
  SceneSpec s = builtin_scene("spheres_cube");
  json j = s;
  SceneSpec back = j.get<SceneSpec>();
  json j2 = back;
  CHECK(j == j2);
  CHECK(back.robots.size() == s.robots.size());
  CHECK(back.objects.size() == s.objects.size());
  CHECK(back.objects[0].kind == ShapeKind::Box);
}

TEST_CASE("scene validation rejects bad input") {
  SceneSpec s = builtin_scene("spheres_ramp");
  SceneSpec bad = s;
  bad.objects[0].mass = 0.0;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = s;
  bad.surfaces[0].normal = Vec3(0, 0, 2);
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = s;
  bad.robots.clear();
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = s;
  ObjectSpec box;
  box.kind = ShapeKind::Box;
  box.half_extents = Vec3(0.05, 0.05, 0.05);
  box.mass = 1.0;
  bad.objects.push_back(box);
  bad.objects.push_back(box);
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("default state rests bodies without penetration") {
  for (const char* name : {"spheres_ramp", "spheres_cube"}) {
    SceneSpec scene = builtin_scene(name);
    SystemState st = default_state(scene);
    CHECK(st.all_finite());
    CHECK(st.robot_q.size() == scene.robot_dof());
    CHECK(st.object_poses.size() == scene.objects.size());
    for (size_t i = 0; i < scene.objects.size(); ++i) {
      CHECK(st.object_vels[i].lin.norm() == 0.0);
    }
  }
}

TEST_CASE("state json round trip preserves quaternions") {
  SceneSpec scene = builtin_scene("spheres_cube");
  SystemState st = default_state(scene);
  st.object_poses[0].quat = Quat(0.9, 0.1, 0.2, -0.3).normalized();
  st.object_vels[0].ang = Vec3(0.1, -0.2, 0.3);
  json j = st;
  SystemState back = j.get<SystemState>();
  CHECK(back == st);
}

TEST_CASE("state json rejects malformed input") {
  SceneSpec scene = builtin_scene("spheres_ramp");
  json j = default_state(scene);
  json bad = j;
  bad["robot_q"] = std::vector<double>{1.0, 2.0};
  CHECK_THROWS_AS(bad.get<SystemState>(), ValidationError);
  bad = j;
  bad["robot_q"][0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(bad.get<SystemState>(), ValidationError);
}

TEST_CASE("action json round trip") {
  SceneSpec scene = builtin_scene("spheres_cube");
  ActionCommand a = zero_action(scene, 0.25);
  a.robot_target_vel[0] = Vec3(0.3, -0.1, 0.2);
  json j = a;
  ActionCommand back = j.get<ActionCommand>();
  CHECK(back.duration == a.duration);
  CHECK(back.robot_target_vel[0] == a.robot_target_vel[0]);
  CHECK(back.robot_target_vel[1] == a.robot_target_vel[1]);
}
