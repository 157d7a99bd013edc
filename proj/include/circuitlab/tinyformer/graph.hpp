#pragma once

#include <compare>
#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace clab {

enum class ComponentKind : std::uint8_t { Embed, Wq, Wk, Wv, Wo, Wup, Wdown, Unembed };
enum class ComponentClass : std::uint8_t { Attn, MLP, Other };

/// One independent parameter matrix group: per-head for attention, per-layer
/// for the MLP. Embed and Unembed carry no layer.
struct ComponentId {
    ComponentKind kind = ComponentKind::Embed;
    int layer = -1;
    int head = -1;

    static ComponentId embed() { return {ComponentKind::Embed, -1, -1}; }
    static ComponentId unembed() { return {ComponentKind::Unembed, -1, -1}; }
    static ComponentId attn(ComponentKind k, int layer, int head) { return {k, layer, head}; }
    static ComponentId mlp(ComponentKind k, int layer) { return {k, layer, -1}; }

    friend auto operator<=>(const ComponentId&, const ComponentId&) = default;
};

ComponentClass component_class(ComponentKind kind);
inline ComponentClass component_class(const ComponentId& id) { return component_class(id.kind); }
/// Components that may be localized, frozen or counted against a budget.
inline bool is_eligible(const ComponentId& id)
{
    return id.kind != ComponentKind::Embed && id.kind != ComponentKind::Unembed;
}

std::string to_string(const ComponentId& id);
/// Inverse of to_string: "Embed", "Unembed", "L1.H0.Wq", "L2.Wup".
ComponentId parse_component(std::string_view text);
std::string_view to_string(ComponentClass c);

struct Edge {
    int sender = 0;
    int receiver = 0;
    bool structural = false;
    friend bool operator==(const Edge&, const Edge&) = default;
};

/// Nodes are stored in a topological order; edges are sorted by
/// (sender, receiver) and every edge points forward in that order.
class ComputationalGraph {
public:
    ComputationalGraph() = default;
    ComputationalGraph(std::vector<ComponentId> nodes, std::vector<Edge> edges);

    [[nodiscard]] const std::vector<ComponentId>& nodes() const { return nodes_; }
    [[nodiscard]] const std::vector<Edge>& edges() const { return edges_; }
    [[nodiscard]] std::size_t node_count() const { return nodes_.size(); }
    [[nodiscard]] std::size_t edge_count() const { return edges_.size(); }
    [[nodiscard]] const ComponentId& node(int i) const { return nodes_[static_cast<std::size_t>(i)]; }

    /// Throws std::out_of_range for unknown components.
    [[nodiscard]] int index_of(const ComponentId& id) const;
    [[nodiscard]] bool contains(const ComponentId& id) const;
    /// Edge index or -1.
    [[nodiscard]] int find_edge(int sender, int receiver) const;

    [[nodiscard]] const std::vector<int>& in_edges(int node) const { return in_[static_cast<std::size_t>(node)]; }
    [[nodiscard]] const std::vector<int>& out_edges(int node) const { return out_[static_cast<std::size_t>(node)]; }

    /// Class used when attributing an edge to Attn or MLP: the sender's class,
    /// or the receiver's when the sender is Embed.
    [[nodiscard]] ComponentClass edge_class(int edge) const;

    [[nodiscard]] std::string edge_name(int edge) const;
    [[nodiscard]] std::string digest() const;

private:
    std::vector<ComponentId> nodes_;
    std::vector<Edge> edges_;
    std::vector<std::vector<int>> in_;
    std::vector<std::vector<int>> out_;
    std::unordered_map<std::uint64_t, int> index_;
};

struct ModelConfig;
ComputationalGraph build_graph(const ModelConfig& config);

}  // namespace clab
