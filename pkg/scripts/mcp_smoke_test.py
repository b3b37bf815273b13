import os

import anyio
from mcp.client.streamable_http import streamable_http_client
from mcp import ClientSession

URL = os.getenv("MESHFL_MCP_URL", "http://localhost:8000/mcp")


async def main() -> None:
    async with streamable_http_client(URL, terminate_on_close=False) as (
        read,
        write,
        get_session_id,
    ):
        async with ClientSession(read, write) as session:
            info = await session.initialize()
            print("initialized", info)

            tools = await session.list_tools()
            print("tools", [t.name for t in tools.tools])

            presets = await session.call_tool("list_presets", {})
            print("list_presets result", presets)

            result = await session.call_tool(
                "run_preset",
                {"preset": "hop_placement", "variant": "single_hop", "protocol": "baseline"},
            )
            print("call_tool result", result)


if __name__ == "__main__":
    anyio.run(main)
