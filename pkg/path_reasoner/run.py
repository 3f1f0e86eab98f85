import os

import uvicorn

if __name__ == "__main__":
    uvicorn.run("path_reasoner.app:app", host="0.0.0.0", port=int(os.getenv("PORT", "8010")), reload=True)
