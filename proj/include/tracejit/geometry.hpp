/*
    tracejit/geometry.hpp -- Ray intersection against spheres and triangles
*/

#pragma once

#include "kernel.hpp"
#include "ops.hpp"

#include <array>
#include <vector>

namespace tj {

using Vec3d = std::array<double, 3>;

/// Host-side geometry registered as the ray query backend of a context.
/// Brute force by default; build_bvh() switches to a median-split BVH.
/// Ties in the hit distance resolve to the lowest primitive index, so both
/// paths return identical records.
class Geometry : public RayQueryHook {
public:
    enum class Kind : uint8_t { Sphere, Triangle };

    struct Prim {
        Kind kind;
        uint32_t shape;
        Vec3d p0, p1, p2;   // sphere: p0 = center, p1[0] = radius
    };

    uint32_t add_sphere(const Vec3d &center, double radius, uint32_t shape);
    uint32_t add_triangle(const Vec3d &a, const Vec3d &b, const Vec3d &c, uint32_t shape);

    /// Quad a,b,c,d as triangles (a,b,c) and (a,c,d); returns the first prim id
    uint32_t add_quad(const Vec3d &a, const Vec3d &b, const Vec3d &c, const Vec3d &d,
                      uint32_t shape);

    void build_bvh(uint32_t leaf_size = 4);
    bool has_bvh() const { return !m_nodes.empty(); }

    const std::vector<Prim> &prims() const { return m_prims; }

    void intersect(uint32_t n, const double *o[3], const double *d[3], const double *maxt,
                   const uint8_t *active, bool shadow, uint8_t *hit, double *t,
                   uint32_t *prim, uint32_t *shape, double *u, double *v) const override;

    /// Single ray query; returns false on a miss
    bool intersect1(const Vec3d &o, const Vec3d &d, double maxt, double &t, uint32_t &prim,
                    double &u, double &v) const;

private:
    struct Node {
        Vec3d lo, hi;
        uint32_t left = 0, count = 0;   // count > 0: leaf over m_order[left, left+count)
        uint32_t right = 0;
    };

    bool hit_prim(uint32_t i, const Vec3d &o, const Vec3d &d, double maxt, double &t,
                  double &u, double &v) const;
    uint32_t build(uint32_t begin, uint32_t end, uint32_t leaf_size);

    std::vector<Prim> m_prims;
    std::vector<Node> m_nodes;
    std::vector<uint32_t> m_order;
};

/// Traced hit record. 'valid' is false for misses and masked lanes, where
/// all other fields are zero.
struct Hit {
    Var valid, t, prim, shape, u, v;
};

/// Nearest-hit query lowered to a ray query instruction
Hit ray_intersect(const std::array<Var, 3> &o, const std::array<Var, 3> &d, const Var &maxt,
                  const Var &mask);

/// Occlusion-only query
Var ray_test(const std::array<Var, 3> &o, const std::array<Var, 3> &d, const Var &maxt,
             const Var &mask);

} // namespace tj
