#include "circuitlab/tinyformer/graph.hpp"

#include "circuitlab/common/digest.hpp"
#include "circuitlab/tinyformer/config.hpp"

#include <algorithm>
#include <charconv>
#include <stdexcept>

namespace clab {

namespace {

constexpr std::string_view kKindNames[] = {"Embed", "Wq", "Wk", "Wv", "Wo", "Wup", "Wdown", "Unembed"};

std::uint64_t pack(const ComponentId& id)
{
    return (static_cast<std::uint64_t>(id.kind) << 48) | (static_cast<std::uint64_t>(id.layer + 1) << 24) |
           static_cast<std::uint64_t>(id.head + 1);
}

int parse_int(std::string_view s)
{
    int v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size()) throw std::invalid_argument("bad component index '" + std::string(s) + "'");
    return v;
}

ComponentKind parse_kind(std::string_view s)
{
    for (std::size_t i = 0; i < std::size(kKindNames); ++i)
        if (kKindNames[i] == s) return static_cast<ComponentKind>(i);
    throw std::invalid_argument("unknown component kind '" + std::string(s) + "'");
}

}  // namespace

ComponentClass component_class(ComponentKind kind)
{
    switch (kind) {
    case ComponentKind::Wq:
    case ComponentKind::Wk:
    case ComponentKind::Wv:
    case ComponentKind::Wo: return ComponentClass::Attn;
    case ComponentKind::Wup:
    case ComponentKind::Wdown: return ComponentClass::MLP;
    default: return ComponentClass::Other;
    }
}

std::string_view to_string(ComponentClass c)
{
    switch (c) {
    case ComponentClass::Attn: return "Attn";
    case ComponentClass::MLP: return "MLP";
    default: return "Other";
    }
}

std::string to_string(const ComponentId& id)
{
    const std::string kind(kKindNames[static_cast<std::size_t>(id.kind)]);
    if (id.layer < 0) return kind;
    std::string out = "L" + std::to_string(id.layer) + ".";
    if (id.head >= 0) out += "H" + std::to_string(id.head) + ".";
    return out + kind;
}

ComponentId parse_component(std::string_view text)
{
    if (text == "Embed") return ComponentId::embed();
    if (text == "Unembed") return ComponentId::unembed();
    ComponentId id;
    std::size_t pos = 0;
    auto next = [&]() {
        const auto dot = text.find('.', pos);
        std::string_view part = text.substr(pos, dot == std::string_view::npos ? std::string_view::npos : dot - pos);
        pos = dot == std::string_view::npos ? text.size() : dot + 1;
        return part;
    };
    auto part = next();
    if (part.size() < 2 || part[0] != 'L') throw std::invalid_argument("bad component '" + std::string(text) + "'");
    id.layer = parse_int(part.substr(1));
    part = next();
    if (!part.empty() && part[0] == 'H') {
        id.head = parse_int(part.substr(1));
        part = next();
    }
    id.kind = parse_kind(part);
    const bool attn = component_class(id.kind) == ComponentClass::Attn;
    if (pos != text.size() || attn != (id.head >= 0) || component_class(id.kind) == ComponentClass::Other)
        throw std::invalid_argument("bad component '" + std::string(text) + "'");
    return id;
}

ComputationalGraph::ComputationalGraph(std::vector<ComponentId> nodes, std::vector<Edge> edges)
    : nodes_(std::move(nodes)), edges_(std::move(edges))
{
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        if (!index_.emplace(pack(nodes_[i]), static_cast<int>(i)).second)
            throw std::invalid_argument("duplicate node " + to_string(nodes_[i]));
    }
    std::sort(edges_.begin(), edges_.end(), [](const Edge& a, const Edge& b) {
        return a.sender != b.sender ? a.sender < b.sender : a.receiver < b.receiver;
    });
    in_.assign(nodes_.size(), {});
    out_.assign(nodes_.size(), {});
    for (std::size_t e = 0; e < edges_.size(); ++e) {
        const Edge& edge = edges_[e];
        const auto n = static_cast<int>(nodes_.size());
        if (edge.sender < 0 || edge.receiver < 0 || edge.sender >= n || edge.receiver >= n)
            throw std::invalid_argument("edge endpoint out of range");
        if (edge.sender >= edge.receiver) throw std::invalid_argument("edge violates topological order");
        if (e > 0 && edges_[e - 1].sender == edge.sender && edges_[e - 1].receiver == edge.receiver)
            throw std::invalid_argument("duplicate edge");
        out_[static_cast<std::size_t>(edge.sender)].push_back(static_cast<int>(e));
        in_[static_cast<std::size_t>(edge.receiver)].push_back(static_cast<int>(e));
    }
}

int ComputationalGraph::index_of(const ComponentId& id) const
{
    const auto it = index_.find(pack(id));
    if (it == index_.end()) throw std::out_of_range("component not in graph: " + to_string(id));
    return it->second;
}

bool ComputationalGraph::contains(const ComponentId& id) const { return index_.contains(pack(id)); }

int ComputationalGraph::find_edge(int sender, int receiver) const
{
    if (sender < 0 || static_cast<std::size_t>(sender) >= nodes_.size()) return -1;
    for (const int e : out_[static_cast<std::size_t>(sender)])
        if (edges_[static_cast<std::size_t>(e)].receiver == receiver) return e;
    return -1;
}

ComponentClass ComputationalGraph::edge_class(int edge) const
{
    const Edge& e = edges_[static_cast<std::size_t>(edge)];
    const ComponentId& s = node(e.sender);
    if (s.kind == ComponentKind::Embed) return component_class(node(e.receiver));
    return component_class(s);
}

std::string ComputationalGraph::edge_name(int edge) const
{
    const Edge& e = edges_[static_cast<std::size_t>(edge)];
    return to_string(node(e.sender)) + "->" + to_string(node(e.receiver));
}

std::string ComputationalGraph::digest() const
{
    Digest d;
    for (const auto& n : nodes_) d.text(to_string(n)).text(";");
    for (const auto& e : edges_) d.u64(static_cast<std::uint64_t>(e.sender)).u64(static_cast<std::uint64_t>(e.receiver)).u64(e.structural);
    return d.hex();
}

ComputationalGraph build_graph(const ModelConfig& config)
{
    config.validate();
    std::vector<ComponentId> nodes;
    nodes.push_back(ComponentId::embed());
    for (int l = 0; l < config.n_layers; ++l) {
        for (int h = 0; h < config.n_heads; ++h)
            for (const auto k : {ComponentKind::Wq, ComponentKind::Wk, ComponentKind::Wv, ComponentKind::Wo})
                nodes.push_back(ComponentId::attn(k, l, h));
        nodes.push_back(ComponentId::mlp(ComponentKind::Wup, l));
        nodes.push_back(ComponentId::mlp(ComponentKind::Wdown, l));
    }
    nodes.push_back(ComponentId::unembed());

    const auto reads_residual = [](ComponentKind k) {
        return k == ComponentKind::Wq || k == ComponentKind::Wk || k == ComponentKind::Wv || k == ComponentKind::Wup ||
               k == ComponentKind::Unembed;
    };
    // Whether writer w has written before reader r reads the residual stream.
    const auto writes_before = [](const ComponentId& w, const ComponentId& r) {
        if (w.kind == ComponentKind::Embed) return true;
        if (r.kind == ComponentKind::Unembed) return true;
        if (w.kind == ComponentKind::Wo) return r.layer > w.layer || (r.layer == w.layer && r.kind == ComponentKind::Wup);
        return r.layer > w.layer;  // Wdown
    };

    std::vector<Edge> edges;
    for (std::size_t s = 0; s < nodes.size(); ++s) {
        const ComponentId& w = nodes[s];
        const bool writer = w.kind == ComponentKind::Embed || w.kind == ComponentKind::Wo || w.kind == ComponentKind::Wdown;
        for (std::size_t r = s + 1; r < nodes.size(); ++r) {
            const ComponentId& rd = nodes[r];
            bool edge = false;
            bool structural = false;
            if (writer && reads_residual(rd.kind)) {
                edge = writes_before(w, rd);
            } else if ((w.kind == ComponentKind::Wq || w.kind == ComponentKind::Wk || w.kind == ComponentKind::Wv) &&
                       rd.kind == ComponentKind::Wo && rd.layer == w.layer && rd.head == w.head) {
                edge = structural = true;
            } else if (w.kind == ComponentKind::Wup && rd.kind == ComponentKind::Wdown && rd.layer == w.layer) {
                edge = structural = true;
            }
            if (edge) edges.push_back({static_cast<int>(s), static_cast<int>(r), structural});
        }
    }
    return ComputationalGraph(std::move(nodes), std::move(edges));
}

}  // namespace clab
